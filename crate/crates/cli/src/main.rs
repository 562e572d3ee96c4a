use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use loadcast_core::arima::{acf, adf_test, difference, pacf, write_acf_pacf_csv, write_adf_csv};
use loadcast_core::config::{ExperimentConfig, Preset};
use loadcast_core::models::ModelKind;
use loadcast_core::pipeline::{self, Experiment};
use loadcast_core::report::{self, ModelResult, ReportModel};
use loadcast_core::Error;

const ACF_LAGS: usize = 48;

#[derive(Parser)]
#[command(name = "loadcast", version, about = "Hourly electricity load forecasting benchmark")]
struct Cli {
    /// TOML experiment config, overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "paper")]
    preset: PresetArg,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Arima,
    Lstm,
    Bilstm,
    Transformer,
}

impl From<ModelArg> for ReportModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Arima => ReportModel::Arima,
            ModelArg::Lstm => ReportModel::Lstm,
            ModelArg::Bilstm => ReportModel::BiLstm,
            ModelArg::Transformer => ReportModel::Transformer,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Regularise and interpolate the series; dump stats, ACF/PACF and ADF tables.
    Preprocess,
    /// Fit one model and write its checkpoint and training log.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Leave the seconds column of the training log empty.
        #[arg(long)]
        no_timing: bool,
    },
    /// Forecast the test windows with a previously trained model.
    Forecast {
        #[arg(long, value_enum)]
        model: ModelArg,
    },
    /// Run every configured model on one split and write the report.
    Benchmark {
        #[arg(long)]
        no_timing: bool,
    },
    /// Re-emit table, bar data and traces from an existing report.json.
    Report {
        #[arg(long)]
        week_origin: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("LOADCAST_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("LOADCAST_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(e.to_string()))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let preset = match cli.preset {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Desk => Preset::Desk,
    };
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, preset)?,
        None => ExperimentConfig::preset(preset),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Preprocess => preprocess(&cfg),
        Command::Train { model, no_timing } => train(&cfg, model.into(), !no_timing),
        Command::Forecast { model } => {
            let result = pipeline::forecast_saved(&cfg, model.into())?;
            write_metrics(&cfg.out_dir, &result)?;
            print_result(&result);
            Ok(())
        }
        Command::Benchmark { no_timing } => {
            let r = pipeline::benchmark(&cfg, !no_timing)?;
            print!("{}", report::emit_table(&r));
            for m in &r.models {
                for n in &m.notes {
                    eprintln!("{}: {n}", m.model);
                }
            }
            Ok(())
        }
        Command::Report { week_origin } => {
            let r = report::read_json(&cfg.out_dir.join("report.json"))?;
            report::write_all(&r, &cfg.out_dir, week_origin.unwrap_or(cfg.week_origin))?;
            print!("{}", report::emit_table(&r));
            Ok(())
        }
    }
}

fn preprocess(cfg: &ExperimentConfig) -> Result<(), Error> {
    let loaded = pipeline::load_series(cfg)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)?;
    loaded.series.write_csv(BufWriter::new(File::create(dir.join("series.csv"))?))?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("stats.json"))?), &loaded.stats)?;

    let values = &loaded.series.values;
    let lags = ACF_LAGS.min(values.len().saturating_sub(2));
    let a = acf(values, lags)?;
    let p = pacf(values, lags)?;
    write_acf_pacf_csv(BufWriter::new(File::create(dir.join("acf_pacf.csv"))?), &a, &p)?;
    let mut adf = Vec::new();
    for d in 0..=cfg.arima.max_d {
        adf.push((d, adf_test(&difference(values, d)?, None)?));
    }
    write_adf_csv(BufWriter::new(File::create(dir.join("adf.csv"))?), &adf)?;

    let s = &loaded.stats;
    println!(
        "rows={} gaps_filled={} duplicates_merged={} min_mw={} max_mw={}",
        s.rows, s.gaps_filled, s.duplicates_merged, s.min_mw, s.max_mw
    );
    Ok(())
}

fn neural_kind(m: ReportModel) -> Option<ModelKind> {
    match m {
        ReportModel::Arima => None,
        ReportModel::Lstm => Some(ModelKind::Lstm),
        ReportModel::BiLstm => Some(ModelKind::BiLstm),
        ReportModel::Transformer => Some(ModelKind::Transformer),
    }
}

fn train(cfg: &ExperimentConfig, model: ReportModel, timing: bool) -> Result<(), Error> {
    let exp = Experiment::prepare(cfg)?;
    let dir = &cfg.out_dir;
    let result = match neural_kind(model) {
        None => {
            let run = pipeline::run_arima(&exp, cfg);
            pipeline::write_arima_artifacts(dir, &run)?;
            run.result
        }
        Some(kind) => {
            let run = pipeline::run_neural(&exp, cfg, kind);
            pipeline::write_neural_artifacts(dir, kind, &run, timing)?;
            run.result
        }
    };
    if result.metrics.is_none() {
        return Err(Error::Fit(format!("{model}: {}", result.notes.join("; "))));
    }
    write_metrics(dir, &result)?;
    pipeline::write_forecasts_csv(
        &dir.join(format!("forecasts_{}.csv", model.slug())),
        &exp.target_starts,
        &result.predictions_mw,
        cfg.horizon,
    )?;
    print_result(&result);
    Ok(())
}

fn write_metrics(dir: &Path, r: &ModelResult) -> Result<(), Error> {
    let path = dir.join(format!("metrics_{}.json", r.model.slug()));
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &r.metrics)?;
    Ok(())
}

fn print_result(r: &ModelResult) {
    match r.metrics {
        Some(m) => println!("{}: mae={} rmse={} mape={}%", r.model, m.mae, m.rmse, m.mape),
        None => println!("{}: failed", r.model),
    }
    for n in &r.notes {
        eprintln!("{}: {n}", r.model);
    }
}
