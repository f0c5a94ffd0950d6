use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asu_core::agemodel::forward;
use asu_core::checkpoint::Checkpoint;
use asu_core::demographics_stream::{
    parse_records, persist_histogram, process_stream, StreamConfig,
};
use asu_core::experiment::{
    header_comments, load_config, load_data, run_experiment, simulate_comm, timing_csv,
};
use asu_core::label_dist::{softmax, AgeClassSet, DEFAULT_THETA};
use asu_core::metrics::{evaluate, predict_age_with, GroupRule, Predictor, DEFAULT_GAPS};
use asu_core::netmodel::LinkModel;
use asu_core::output::write_atomic;
use asu_core::ps_core::{train, Execution, TrainingLog};
use asu_core::synthetic::{dataset_to_csv, generate_synthetic, parse_dataset};
use asu_core::Error;
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(
    name = "asu",
    version,
    about = "Sparse-update parameter-server training and age-estimation tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model with the filter named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run workers in the calling thread instead of one thread each.
        #[arg(long)]
        sequential: bool,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a labelled dataset with a checkpoint and report MAE, group accuracy and the error histogram.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f64,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GAPS.to_vec())]
        gaps: Vec<f64>,
        #[arg(long, default_value_t = 5.0)]
        bin_width: f64,
        /// `centered` or `fixed-bins`.
        #[arg(long, default_value = "centered")]
        rule: GroupRule,
        /// `expectation` or `argmax`.
        #[arg(long, default_value = "expectation")]
        predictor: Predictor,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a training log through the link cost model.
    SimulateComm {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        bandwidth_bps: f64,
        #[arg(long, default_value_t = 0.0)]
        latency_s: f64,
        #[arg(long, default_value_t = 0.0)]
        compute_seconds: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch a record stream into intervals, score it and persist the age-group histogram.
    Demographics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        interval_seconds: f64,
        #[arg(long, default_value_t = 10.0)]
        group_width: f64,
        #[arg(long, default_value_t = 0.0)]
        lateness: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset as train.csv and test.csv.
    GenerateData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        input_dim: usize,
        #[arg(long, default_value_t = 1)]
        min_age: u32,
        #[arg(long, default_value_t = 70)]
        max_age: u32,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured filter and write logs, comparison, timing and speedup tables.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 2,
        Error::Io { .. } | Error::Corrupt(_) => 3,
        _ => 1,
    }
}

fn create_dir(dir: &Path) -> asu_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> asu_core::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, text: &str) -> asu_core::Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> asu_core::Result<()> {
    match command {
        Command::Train {
            config,
            out,
            sequential,
            dry_run,
        } => {
            let config = load_config(&config)?;
            if dry_run {
                print!("{}", config.to_toml());
                return Ok(());
            }
            let (train_set, test_set) = load_data(&config.data)?;
            let mode = if sequential {
                Execution::Sequential
            } else {
                Execution::Threaded
            };
            info!(
                "training {} for {} iterations",
                config.train.filter, config.train.max_iterations
            );
            let outcome = train(&config.train, &train_set, &test_set, mode)?;
            create_dir(&out)?;
            let comments = header_comments(&config, Some(&config.train));
            write_atomic(
                &out.join("log.csv"),
                outcome.log.to_csv(&comments).as_bytes(),
            )?;
            let ckpt = Checkpoint::new(
                config.train.spec.clone(),
                config.data.min_age,
                outcome.params,
            )?;
            write_atomic(&out.join("model.ckpt"), &ckpt.encode())?;
            if let Some(t) = outcome.log.final_test_loss() {
                println!("final test loss {t}");
            }
            Ok(())
        }
        Command::Eval {
            model,
            data,
            theta,
            gaps,
            bin_width,
            rule,
            predictor,
            out,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let classes = ckpt.classes();
            let samples = parse_dataset(&read(&data)?, &classes, theta)?;
            if samples.is_empty() {
                return Err(Error::Argument(format!(
                    "{} holds no samples",
                    data.display()
                )));
            }
            let mut preds = Vec::with_capacity(samples.len());
            for s in &samples {
                let logits = forward(&ckpt.params, &ckpt.spec, &s.features)?;
                preds.push(predict_age_with(softmax(&logits), &classes, predictor)?.expected_age);
            }
            let truths: Vec<f64> = samples.iter().map(|s| f64::from(s.age)).collect();
            let report = evaluate(&preds, &truths, &gaps, bin_width, rule)?;
            emit(out.as_deref(), &report.to_csv())
        }
        Command::SimulateComm {
            log,
            bandwidth_bps,
            latency_s,
            compute_seconds,
            out,
        } => {
            let link = LinkModel::new(bandwidth_bps, latency_s)?;
            let training_log = TrainingLog::parse_csv(&read(&log)?)?;
            let timings = simulate_comm(&training_log, &link, compute_seconds)?;
            let comments = [format!(
                "log: {} bandwidth_bps={bandwidth_bps} latency_s={latency_s} compute_seconds={compute_seconds}",
                log.display()
            )];
            emit(out.as_deref(), &timing_csv(&timings, &comments))
        }
        Command::Demographics {
            model,
            input,
            interval_seconds,
            group_width,
            lateness,
            out,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let records = parse_records(&read(&input)?)?;
            let config = StreamConfig {
                interval_seconds,
                group_width,
                lateness,
            };
            let report =
                process_stream(&ckpt.params, &ckpt.spec, &ckpt.classes(), records, &config)?;
            create_dir(&out)?;
            write_atomic(&out.join("scores.csv"), report.scores_csv().as_bytes())?;
            persist_histogram(&report.histogram, &out.join("histogram.csv"))?;
            println!(
                "{} intervals, {} records scored, {} rejected",
                report.intervals,
                report.accepted(),
                report.rejected.len()
            );
            Ok(())
        }
        Command::GenerateData {
            n,
            input_dim,
            min_age,
            max_age,
            theta,
            seed,
            out,
        } => {
            let classes = AgeClassSet::new(min_age, max_age)?;
            let (train_set, test_set) = generate_synthetic(n, input_dim, &classes, theta, seed)?;
            create_dir(&out)?;
            write_atomic(
                &out.join("train.csv"),
                dataset_to_csv(&train_set).as_bytes(),
            )?;
            write_atomic(&out.join("test.csv"), dataset_to_csv(&test_set).as_bytes())
        }
        Command::Experiment {
            config,
            out,
            dry_run,
        } => {
            let config = load_config(&config)?;
            if dry_run {
                print!("{}", config.to_toml());
                return Ok(());
            }
            let report = run_experiment(&config, &out)?;
            for run in &report.runs {
                println!(
                    "{}: final test loss {}, mean drop fraction {:.4}",
                    run.filter,
                    run.outcome
                        .log
                        .final_test_loss()
                        .map_or("n/a".into(), |t| t.to_string()),
                    run.outcome.log.mean_drop_fraction()
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
