//! `mihash` command-line entry point.
//!
//! Failures print a single line `mihash: error[<kind>]: <message>` to stderr
//! and exit with status 1 (2 for usage errors).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mihash::config::{load_config, parse_override};
use mihash::convergence::{simulate_slack, ScatterConfig, ScatterInit, Schedule, SlackSetup};
use mihash::io;
use mihash::mutual_info::{estimate_stats, mi_loss};
use mihash::pipeline;
use mihash::synthetic::ClusterSpec;
use mihash::Error;

#[derive(Parser)]
#[command(name = "mihash", version, about = "Unsupervised binary hashing with bit mutual-information minimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a hash model and write model, codes, log and checkpoints.
    Train {
        #[arg(long)]
        features: PathBuf,
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, repeatable: --set beta=0.001
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode features with a trained model.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a retrieval index from a code file.
    Index {
        #[arg(long)]
        codes: PathBuf,
        /// Label file supplying ids and relevance labels.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k Hamming search; CSV rows query,rank,id,distance.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MAP@k, precision-recall and utilization CSVs.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        query_labels: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-pair bit statistics and mutual information.
    Stats {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterate the slack recursion for one bit pair.
    SimulateConvergence {
        /// Initial joint table P(++),P(+-),P(-+),P(--).
        #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.1, 0.2, 0.3])]
        table: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        pull: f64,
        #[arg(long, value_enum, default_value_t = ScheduleKind::Harmonic)]
        schedule: ScheduleKind,
        #[arg(long, default_value_t = 1e-2)]
        eta0: f64,
        #[arg(long, default_value_t = 2.0)]
        power: f64,
        #[arg(long, default_value_t = 0.999)]
        ratio: f64,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mutual-information-only training from a collapsed start, one CSV per step.
    Scatter {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 16)]
        bits: usize,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = ScatterConfig::default().beta)]
        beta: f64,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from random weights instead of a single shared code.
        #[arg(long)]
        random_init: bool,
        #[arg(long, default_value_t = 1e-3)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a labeled Gaussian-cluster feature file.
    GenSynthetic {
        #[arg(long)]
        out_features: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        clusters: usize,
        #[arg(long, default_value_t = 1.0)]
        center_scale: f64,
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleKind {
    Harmonic,
    Power,
    Geometric,
    Constant,
}

fn write_csv_to(out: Option<&Path>, header: &[&str], rows: Vec<[String; 4]>) -> mihash::Result<()> {
    match out {
        Some(p) => io::write_csv(p, header, rows),
        None => {
            let mut w = std::io::BufWriter::new(std::io::stdout().lock());
            let res = writeln!(w, "{}", header.join(","))
                .and_then(|_| rows.iter().try_for_each(|r| writeln!(w, "{}", r.join(","))))
                .and_then(|_| w.flush());
            match res {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                }),
                _ => Ok(()),
            }
        }
    }
}

fn run(cmd: Command) -> mihash::Result<()> {
    match cmd {
        Command::Train {
            features,
            config,
            overrides,
            out,
        } => {
            let overrides = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
            let cfg = load_config(config.as_deref(), &overrides)?;
            let x = io::load_features(&features)?;
            let res = pipeline::train_to_dir(&x, &cfg, &out)?;
            let distinct = res.logs.last().map_or(0, |l| l.distinct_codes);
            println!(
                "epochs={} samples={} bits={} distinct_codes={distinct}",
                res.logs.len(),
                x.rows(),
                cfg.code_len
            );
        }
        Command::Encode { model, features, out } => {
            let codes = pipeline::encode_file(&model, &features, &out)?;
            println!("rows={} bits={}", codes.rows(), codes.bits());
        }
        Command::Index { codes, labels, out } => {
            let (index, vocab) = pipeline::build_index(io::load_codes(&codes)?, labels.as_deref())?;
            io::save_index(&out, &index, &vocab)?;
            println!("rows={} bits={} labels={}", index.len(), index.bits(), vocab.len());
        }
        Command::Query { index, queries, k, out } => {
            let idx = io::load_index(&index)?;
            let rows = pipeline::query_rows(&idx.index, &io::load_codes(&queries)?, k)?;
            write_csv_to(out.as_deref(), &pipeline::QUERY_HEADER, rows)?;
        }
        Command::Eval {
            index,
            queries,
            query_labels,
            k,
            out,
        } => {
            let idx = io::load_index(&index)?;
            let q = io::load_codes(&queries)?;
            let labels = pipeline::load_query_labels(&query_labels, &idx.vocab, q.rows())?;
            let report = pipeline::evaluate_to_dir(&idx.index, &q, &labels, k, &out)?;
            println!("map@{k}={}", report.map_at_k);
        }
        Command::Stats { codes, out } => {
            let stats = estimate_stats(&io::load_codes(&codes)?.unpack())?;
            io::write_csv(&out, &pipeline::STATS_HEADER, pipeline::stats_rows(&stats))?;
            println!("total_mi={}", mi_loss(&stats));
        }
        Command::SimulateConvergence {
            table,
            pull,
            schedule,
            eta0,
            power,
            ratio,
            steps,
            out,
        } => {
            let table: [f64; 4] = table.as_slice().try_into().map_err(|_| {
                Error::InvalidArgument(format!("--table needs 4 probabilities, got {}", table.len()))
            })?;
            let setup = SlackSetup::from_table(table, pull)?;
            let schedule = match schedule {
                ScheduleKind::Harmonic => Schedule::Harmonic { eta0 },
                ScheduleKind::Power => Schedule::Power { eta0, power },
                ScheduleKind::Geometric => Schedule::Geometric { eta0, ratio },
                ScheduleKind::Constant => Schedule::Constant { eta: eta0 },
            };
            let trace = simulate_slack(setup, schedule, steps)?;
            io::write_csv(&out, &pipeline::SLACK_HEADER, pipeline::slack_rows(&trace))?;
            println!(
                "epsilon_0={} epsilon_T={} clamp_events={}",
                trace.initial(),
                trace.last(),
                trace.clamp_events
            );
        }
        Command::Scatter {
            features,
            bits,
            lr,
            beta,
            steps,
            seed,
            random_init,
            margin,
            out,
        } => {
            let cfg = ScatterConfig {
                code_len: bits,
                lr,
                beta,
                steps,
                seed,
                init: if random_init {
                    ScatterInit::Random
                } else {
                    ScatterInit::Collapsed { margin }
                },
            };
            let frames = pipeline::scatter_to_dir(&io::load_features(&features)?, &cfg, &out)?;
            let first = frames.first().map_or(0, |f| f.distinct_points());
            let last = frames.last().map_or(0, |f| f.distinct_points());
            println!("frames={} distinct_first={first} distinct_last={last}", frames.len());
        }
        Command::GenSynthetic {
            out_features,
            out_labels,
            samples,
            dim,
            clusters,
            center_scale,
            spread,
            seed,
        } => {
            let spec = ClusterSpec {
                samples,
                dim,
                clusters,
                center_scale,
                spread,
                seed,
            };
            pipeline::gen_synthetic(&spec, &out_features, &out_labels)?;
            println!("samples={samples} dim={dim} clusters={clusters}");
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            eprintln!("mihash: error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e: Error = e;
            eprintln!("mihash: error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
