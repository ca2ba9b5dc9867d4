//! `debayes`: command-line front end for the experiment runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use debayes_core::data::Dataset;
use debayes_core::experiment::{
    evaluate, prepare_data, selected_reports, summary_text, sweep, train_for, write_artifacts,
    ExperimentConfig, SweepAxis, ENSEMBLE_DIR, GAMMA_FILE, REPORT_FILE,
};
use debayes_core::metrics::{parse_report_table, report_table};
use debayes_core::{Ensemble, Error, GammaSet, PosteriorSampler};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "debayes",
    version,
    about = "Deep ensembles with analytic last-layer posteriors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load data, normalise it and write train/test CSV files.
    GenData(Common),
    /// Train the ensemble and write `<out>/ensemble/`.
    Train(Common),
    /// Compute per-member gammas for a trained ensemble.
    Gamma(Common),
    /// Evaluate a trained ensemble and its gammas; writes the report table.
    Eval(Common),
    /// Draw samples of the regression function or of new observations.
    Sample(SampleArgs),
    /// Repeat the experiment over training-set or ensemble sizes.
    Sweep(SweepArgs),
    /// Merge report tables into one sorted table.
    Report(ReportArgs),
    /// Train, compute gammas, evaluate and write every artifact.
    Run(Common),
}

#[derive(Copy, Clone, ValueEnum)]
enum VariantArg {
    Classical,
    Extended,
    Both,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 = all cores; overrides `threads`.
    #[arg(long)]
    threads: Option<usize>,
    /// Variants to report; overrides `variant`.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Extra `key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Copy, Clone, ValueEnum)]
enum SampleKind {
    Regression,
    Predictive,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Input point in original units, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    x: String,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, value_enum, default_value = "regression")]
    kind: SampleKind,
}

#[derive(Copy, Clone, ValueEnum)]
enum AxisArg {
    TrainSize,
    EnsembleSize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Ascending comma-separated values.
    #[arg(long)]
    values: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Report tables to merge.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the merged table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(|e| e.in_stage("config"))?;
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| e.in_stage("config"))?;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(v) = c.variant {
        let s = match v {
            VariantArg::Classical => "classical",
            VariantArg::Extended => "extended",
            VariantArg::Both => "both",
        };
        cfg.set("variant", s)?;
    }
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Comma-separated rows: inputs, targets, then ground truth when known.
fn dataset_csv(d: &Dataset) -> String {
    let mut s = String::new();
    for i in 0..d.len() {
        let mut row: Vec<String> = d.input(i).iter().map(|v| format!("{v:.17e}")).collect();
        row.extend(d.target(i).iter().map(|v| format!("{v:.17e}")));
        if let Some(g) = d.ground_truth() {
            let p = d.p_y();
            row.extend(g[i * p..(i + 1) * p].iter().map(|v| format!("{v:.17e}")));
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn load_trained(cfg: &ExperimentConfig) -> Result<Ensemble, Error> {
    Ensemble::load(cfg.out_dir.join(ENSEMBLE_DIR)).map_err(|e| e.in_stage("load"))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let data = prepare_data(&cfg).map_err(|e| e.in_stage("data"))?;
            let train = cfg.out_dir.join("train.csv");
            let test = cfg.out_dir.join("test.csv");
            write(&train, &dataset_csv(&data.train))?;
            write(&test, &dataset_csv(&data.test))?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let data = prepare_data(&cfg).map_err(|e| e.in_stage("data"))?;
            let ens = train_for(&cfg, &data).map_err(|e| e.in_stage("train"))?;
            let manifest = ens.save(cfg.out_dir.join(ENSEMBLE_DIR))?;
            println!("{}", manifest.display());
        }
        Command::Gamma(c) => {
            let cfg = load_config(&c)?;
            let data = prepare_data(&cfg).map_err(|e| e.in_stage("data"))?;
            let ens = load_trained(&cfg)?;
            let set = GammaSet::compute(&ens, &data.train, ens.config().lambda)
                .map_err(|e| e.in_stage("gamma"))?;
            let path = cfg.out_dir.join(GAMMA_FILE);
            set.save(&path)?;
            for g in set.gammas() {
                println!("{g:.6e}");
            }
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            let data = prepare_data(&cfg).map_err(|e| e.in_stage("data"))?;
            let ens = load_trained(&cfg)?;
            let set =
                GammaSet::load(cfg.out_dir.join(GAMMA_FILE)).map_err(|e| e.in_stage("load"))?;
            let (cl, ex, _) = evaluate(&cfg.dataset_name(), &ens, &set, &data.test, cfg.ratio_mode)
                .map_err(|e| e.in_stage("eval"))?;
            let rows: Vec<_> = [cl, ex]
                .into_iter()
                .filter(|r| cfg.variant.includes(r.variant))
                .collect();
            let table = report_table(&rows)?;
            write(&cfg.out_dir.join(REPORT_FILE), &table)?;
            print!("{table}");
        }
        Command::Sample(a) => {
            let cfg = load_config(&a.common)?;
            let ens = load_trained(&cfg)?;
            let set =
                GammaSet::load(cfg.out_dir.join(GAMMA_FILE)).map_err(|e| e.in_stage("load"))?;
            let raw: Vec<f64> =
                a.x.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad input value `{s}`")))
                    })
                    .collect::<Result<_, _>>()?;
            if raw.len() != ens.p_x() {
                return Err(Error::Config(format!(
                    "--x has {} values, the ensemble expects {}",
                    raw.len(),
                    ens.p_x()
                )));
            }
            let norm = ens.norm().cloned();
            let x = match norm.as_ref().and_then(|n| n.inputs.as_ref()) {
                Some(s) => s.apply(&raw),
                None => raw,
            };
            let sampler =
                PosteriorSampler::new(&ens, &set, &x).map_err(|e| e.in_stage("sample"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut out = String::new();
            for _ in 0..a.draws {
                let y = match a.kind {
                    SampleKind::Regression => sampler.draw_regression(&mut rng),
                    SampleKind::Predictive => sampler.draw_predictive(&mut rng),
                };
                let y = match &norm {
                    Some(n) => n.invert_targets(&y),
                    None => y,
                };
                let cols: Vec<String> = y.iter().map(|v| format!("{v:.10e}")).collect();
                let _ = writeln!(out, "{}", cols.join(","));
            }
            print!("{out}");
        }
        Command::Sweep(a) => {
            let cfg = load_config(&a.common)?;
            let values: Vec<usize> = a
                .values
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad sweep value `{s}`")))
                })
                .collect::<Result<_, _>>()?;
            let axis = match a.axis {
                AxisArg::TrainSize => SweepAxis::TrainSize,
                AxisArg::EnsembleSize => SweepAxis::EnsembleSize,
            };
            let result = sweep(&cfg, axis, &values).map_err(|e| e.in_stage("sweep"))?;
            let (table, plot) = result.write(&cfg.out_dir)?;
            print!("{}", result.table());
            eprintln!("wrote {} and {}", table.display(), plot.display());
        }
        Command::Report(a) => {
            let mut all = Vec::new();
            for p in &a.inputs {
                let text = fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                all.extend(parse_report_table(&text).map_err(|e| e.in_stage("report"))?);
            }
            let table = report_table(&all)?;
            match a.out {
                Some(p) => write(&p, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let run = debayes_core::run_pipeline(&cfg)?;
            write_artifacts(&cfg, &run).map_err(|e| e.in_stage("write"))?;
            print!("{}", report_table(&selected_reports(&cfg, &run))?);
            eprint!("{}", summary_text(&run));
        }
    }
    Ok(())
}

/// 2 for configuration and usage errors at any stage, 1 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
