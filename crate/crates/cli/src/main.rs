use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use barfiq::config::ExperimentConfig;
use barfiq::dataio::DatasetManifest;
use barfiq::fringe::{read_shots, reconstruct_stream, write_phases, write_shots};
use barfiq::fusion::FusionVariant;
use barfiq::head::Metrics;
use barfiq::network::Network;
use barfiq::params::ParamStore;
use barfiq::pipeline::{self, read_sweep_csv, write_sweep_csv, RunMetrics, SweepRow};
use barfiq::qfm::pearson_matrix;
use barfiq::numcore::Tensor;
use barfiq::training::evaluate;
use barfiq::{selftest, Error};

/// Residual-phase forecasting for atom interferometer shot streams.
#[derive(Parser)]
#[command(name = "barfiq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to any key it omits.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Override a config key, e.g. `--set train.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for both the data generator and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shot stream: shots.csv, truth.csv, manifest.json.
    GenData(Common),
    /// Reconstruct residual phases from a shot CSV into phases.csv.
    FitFringe {
        #[command(flatten)]
        common: Common,
        /// Shot CSV (`iter,theta,rho,phi_rt,a,c,r`); generated from the config if omitted.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Train one model: checkpoint.bin, metrics.json, epochs.csv, config.toml.
    Train(Common),
    /// Re-evaluate a trained run on its test split into eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Window-length by fusion-variant grid from the `[sweep]` config: sweep.csv.
    Sweep(Common),
    /// All four fusion variants at the configured window length: sweep.csv.
    Ablate(Common),
    /// Pearson correlation of feature-map angles (pre) and measurements (post), one CSV per head.
    DiagnoseCorrelation {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Run the theorem and oracle checks and print a pass/fail table.
    Selftest,
    /// Summarize a run or sweep directory against the persistence baseline.
    Report {
        /// Directory written by `train`, `sweep` or `ablate`.
        dir: PathBuf,
        /// Where to write report.csv (defaults to the summarized directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Usage(msg),
            Error::NumericalAbort(_) | Error::NonFinite(_) | Error::Consistency(_) | Error::Shape(_) => {
                Failure::Numerical(msg)
            }
            _ => Failure::Data(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut sets = common.set.clone();
    if let Some(seed) = common.seed {
        sets.push(format!("generator.seed={seed}"));
        sets.push(format!("train.seed={seed}"));
    }
    if let Some(p) = &common.config {
        if !p.exists() {
            return Err(Failure::Usage(format!("config file {} not found", p.display())));
        }
    }
    Ok(ExperimentConfig::load(common.config.as_deref(), &sets)?)
}

fn out_dir(common: &Common) -> Result<&Path, Failure> {
    fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

fn gen_data(common: &Common) -> Outcome {
    let cfg = load(common)?;
    let out = out_dir(common)?;
    let data = pipeline::prepare(&cfg)?;
    write_shots(fs::File::create(out.join("shots.csv"))?, &data.shots)?;
    let mut truth = csv_writer(&out.join("truth.csv"))?;
    writeln!(truth, "iter,delta_phi")?;
    for (s, t) in data.shots.iter().zip(&data.truth) {
        writeln!(truth, "{},{}", s.iter, t)?;
    }
    data.manifest().write_json(fs::File::create(out.join("manifest.json"))?)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let m: DatasetManifest = data.manifest();
    println!(
        "{} shots ({} missing phases), {} windows: train {} / val {} / test {}",
        m.n_shots, m.n_missing_phases, m.n_windows, m.train, m.val, m.test
    );
    Ok(())
}

fn csv_writer(path: &Path) -> std::io::Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

fn fit_fringe(common: &Common, input: Option<&Path>) -> Outcome {
    let cfg = load(common)?;
    let shots = match input {
        Some(p) => read_shots::<f64, _>(fs::File::open(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?)?,
        None => barfiq::dataio::generate_stream::<f64>(&cfg.generator)?.0,
    };
    let phases = reconstruct_stream(&shots, &cfg.fringe)?;
    let out = out_dir(common)?;
    write_phases(fs::File::create(out.join("phases.csv"))?, &phases)?;
    let ok = phases.iter().filter(|p| p.is_ok()).count();
    println!("{ok}/{} shots reconstructed, {} missing", phases.len(), phases.len() - ok);
    Ok(())
}

fn print_metrics(m: &RunMetrics) {
    println!(
        "L={} {}: test MAE {:.4}, RMSE {:.4} (persistence MAE {:.4}, circular mean MAE {:.4}); {} epochs, best {}",
        m.window_len,
        m.variant.as_str(),
        m.model.mae,
        m.model.rmse,
        m.baselines.persistence.mae,
        m.baselines.circular_mean.mae,
        m.epochs_run,
        m.best_epoch
    );
}

fn train(common: &Common) -> Outcome {
    let cfg = load(common)?;
    let out = out_dir(common)?;
    let run = pipeline::run(&cfg)?;
    pipeline::write_run(out, &cfg, &run)?;
    print_metrics(&run.metrics);
    match &run.metrics.aborted {
        Some(msg) => Err(Failure::Numerical(format!("training aborted ({msg}); best parameters saved"))),
        None => Ok(()),
    }
}

/// Loads a run directory's config and checkpoint.
fn load_run(run: &Path, common: &Common) -> Result<(ExperimentConfig, Network, ParamStore<f64>), Failure> {
    let cfg_path = run.join("config.toml");
    let ckpt = run.join("checkpoint.bin");
    if !cfg_path.exists() || !ckpt.exists() {
        return Err(Failure::Data(format!("{} is not a training run directory", run.display())));
    }
    let text = fs::read_to_string(&cfg_path)?;
    let cfg = ExperimentConfig::from_toml_str(&text, &common.set)?;
    let (net, mut ps) = Network::new::<f64>(&cfg.network(), cfg.train.window_len, cfg.train.seed)?;
    ps.load_checkpoint(fs::File::open(ckpt)?)?;
    Ok((cfg, net, ps))
}

fn eval(common: &Common, run: &Path) -> Outcome {
    let (cfg, net, ps) = load_run(run, common)?;
    let data = pipeline::prepare(&cfg)?;
    let model: Metrics = evaluate(&net, &ps, &data.split.test)?;
    let baselines = pipeline::baselines(&data.split)?;
    let out = out_dir(common)?;
    let report = serde_json::json!({ "model": model, "baselines": baselines });
    let mut json = serde_json::to_vec_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?;
    json.push(b'\n');
    fs::write(out.join("eval.json"), json)?;
    println!(
        "test MAE {:.4}, MSE {:.4}, RMSE {:.4} on {} samples (persistence MAE {:.4})",
        model.mae, model.mse, model.rmse, model.n_samples, baselines.persistence.mae
    );
    Ok(())
}

fn run_grid(common: &Common, windows: &[usize], variants: &[FusionVariant]) -> Outcome {
    let cfg = load(common)?;
    let out = out_dir(common)?;
    let rows = pipeline::sweep(&cfg, windows, variants, Some(out));
    write_sweep_csv(fs::File::create(out.join("sweep.csv"))?, &rows)?;
    print_table(&rows);
    let failed: Vec<&SweepRow> = rows.iter().filter(|r| r.status != "ok").collect();
    match failed.first() {
        None => Ok(()),
        Some(r) if r.status.starts_with("aborted") => Err(Failure::Numerical(format!("{} cell(s) aborted", failed.len()))),
        Some(r) => Err(Failure::Data(format!("L={} {}: {}", r.window_len, r.variant.as_str(), r.status))),
    }
}

fn sweep(common: &Common) -> Outcome {
    let cfg = load(common)?;
    run_grid(common, &cfg.sweep.windows, &cfg.sweep.variants)
}

fn ablate(common: &Common) -> Outcome {
    let cfg = load(common)?;
    run_grid(common, &[cfg.train.window_len], &FusionVariant::ALL)
}

fn write_corr_csv(path: &Path, m: &[Vec<Option<f64>>]) -> std::io::Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<String> = (0..m.len()).map(|j| format!("q{j}")).collect();
    writeln!(w, "qubit,{}", header.join(","))?;
    for (i, row) in m.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.map_or_else(|| "NA".to_string(), |v| format!("{v}"))).collect();
        writeln!(w, "q{i},{}", cells.join(","))?;
    }
    Ok(())
}

fn diagnose(common: &Common, run: &Path) -> Outcome {
    let (cfg, net, ps) = load_run(run, common)?;
    let data = pipeline::prepare(&cfg)?;
    let n_heads = cfg.qfm.n_heads;
    let mut angles: Vec<Vec<f64>> = vec![Vec::new(); n_heads];
    let mut maps: Vec<Vec<f64>> = vec![Vec::new(); n_heads];
    let mut rows = 0;
    for s in &data.split.test {
        let ins = net.inspect(&ps, &s.features.values)?;
        for k in 0..n_heads {
            angles[k].extend_from_slice(ins.angles[k].data());
            maps[k].extend_from_slice(ins.maps[k].data());
        }
        rows += ins.angles[0].rows();
    }
    let out = out_dir(common)?;
    let nq = cfg.qfm.n_qubits;
    for k in 0..n_heads {
        for (tag, values) in [("pre", &angles[k]), ("post", &maps[k])] {
            let m = pearson_matrix(&Tensor::matrix(rows, nq, values.clone()))?;
            write_corr_csv(&out.join(format!("corr_head{k}_{tag}.csv")), &m)?;
            let undefined = m.iter().flatten().filter(|c| c.is_none()).count();
            println!("head {k} {tag}: {nq}x{nq} over {rows} token rows, {undefined} undefined entries");
        }
    }
    Ok(())
}

fn run_selftest() -> Outcome {
    let checks = selftest::run_all();
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:width$}  {}", c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("{failed} check(s) failed")))
    }
}

fn print_table(rows: &[SweepRow]) {
    println!("{:>5}  {:<6} {:>8} {:>8} {:>8} {:>12} {:>9}  status", "L", "fusion", "MAE", "RMSE", "MSE", "persist MAE", "vs pers.");
    for r in rows {
        println!(
            "{:>5}  {:<6} {:>8.4} {:>8.4} {:>8.4} {:>12.4} {:>+9.4}  {}",
            r.window_len,
            r.variant.as_str(),
            r.mae,
            r.rmse,
            r.mse,
            r.persistence_mae,
            r.mae - r.persistence_mae,
            r.status
        );
    }
}

fn report(dir: &Path, out: Option<&Path>) -> Outcome {
    let sweep_csv = dir.join("sweep.csv");
    let metrics_json = dir.join("metrics.json");
    let rows = if sweep_csv.exists() {
        read_sweep_csv(fs::File::open(&sweep_csv)?)?
    } else if metrics_json.exists() {
        let m: RunMetrics =
            serde_json::from_slice(&fs::read(&metrics_json)?).map_err(|e| Failure::Data(format!("metrics.json: {e}")))?;
        vec![SweepRow {
            window_len: m.window_len,
            variant: m.variant,
            status: m.aborted.as_ref().map_or_else(|| "ok".to_string(), |a| format!("aborted: {a}")),
            mse: m.model.mse,
            mae: m.model.mae,
            rmse: m.model.rmse,
            n_samples: m.model.n_samples,
            best_epoch: m.best_epoch,
            epochs_run: m.epochs_run,
            persistence_mae: m.baselines.persistence.mae,
            circular_mean_mae: m.baselines.circular_mean.mae,
        }]
    } else {
        return Err(Failure::Data(format!("{} has no sweep.csv or metrics.json", dir.display())));
    };
    if rows.is_empty() {
        return Err(Failure::Data(format!("{} is empty", sweep_csv.display())));
    }
    print_table(&rows);
    let target = out.unwrap_or(dir);
    fs::create_dir_all(target)?;
    write_sweep_csv(fs::File::create(target.join("report.csv"))?, &rows)?;
    Ok(())
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::FitFringe { common, input } => fit_fringe(&common, input.as_deref()),
        Command::Train(c) => train(&c),
        Command::Eval { common, run } => eval(&common, &run),
        Command::Sweep(c) => sweep(&c),
        Command::Ablate(c) => ablate(&c),
        Command::DiagnoseCorrelation { common, run } => diagnose(&common, &run),
        Command::Selftest => run_selftest(),
        Command::Report { dir, out } => report(&dir, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) => format!("usage error: {m}"),
                Failure::Data(m) => format!("data error: {m}"),
                Failure::Numerical(m) => format!("numerical error: {m}"),
            };
            eprintln!("barfiq: {msg}");
            ExitCode::from(f.code())
        }
    }
}
