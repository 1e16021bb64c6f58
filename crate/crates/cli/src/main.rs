//! `clstm`: corpus generation, flow extraction, training, evaluation and
//! saliency maps from the command line.
//!
//! Every command prints one `key=value` summary line on stdout. Logs go to
//! stderr (`RUST_LOG` adjusts the level).

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clstm_core::data::DEFAULT_FLOW_BOUND;
use clstm_core::flow::FlowParams;
use clstm_core::saliency::SaliencyMethod;
use clstm_core::Result;

use commands::{SaliencyArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "clstm", version, about = "Convolutional LSTM video classification pipelines")]
struct Cli {
    /// Worker threads for flow extraction and cross-validation folds.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic moving-blob corpus.
    GenData {
        /// `key=value` file overriding the default corpus parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write into a nonempty directory.
        #[arg(long)]
        force: bool,
    },
    /// Compute and cache optical flow for every frame of a corpus.
    ExtractFlow {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "cache")]
        cache: PathBuf,
        /// Averaging window side (odd).
        #[arg(long, default_value_t = FlowParams::default().window)]
        window: usize,
        #[arg(long, default_value_t = FlowParams::default().pyramid_levels)]
        levels: usize,
        #[arg(long, default_value_t = FlowParams::default().iterations)]
        iterations: usize,
        /// Displacement, in pixels, mapped to the ends of the encoded range.
        #[arg(long, default_value_t = DEFAULT_FLOW_BOUND)]
        bound: f64,
    },
    /// Train one leave-one-subject-out fold.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        test_subject: Option<u32>,
        /// Validation subject; defaults to the standard rotation.
        #[arg(long)]
        val_subject: Option<u32>,
    },
    /// Score a trained run, or run full cross-validation.
    Evaluate {
        /// Run directory written by `train`.
        #[arg(long, conflicts_with = "crossval", required_unless_present = "crossval")]
        run: Option<PathBuf>,
        #[arg(long)]
        crossval: bool,
        #[arg(long, requires = "crossval")]
        repeats: Option<usize>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Write saliency overlays for one sequence of a trained run.
    Saliency {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        clip: String,
        /// Index of the sequence's first frame.
        #[arg(long)]
        start: usize,
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long, value_enum, default_value_t = Method::TopFilter)]
        method: Method,
        /// Use an all-zero checkpoint instead of the trained one.
        #[arg(long)]
        untrained: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    TopFilter,
    Gradcam,
}

/// Settings shared by training commands. Flags override `--config`.
#[derive(Args)]
struct RunFlags {
    /// `key=value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    cache: Option<String>,
    #[arg(long)]
    runs: Option<String>,
    /// clstm1, clstm2 or framecnn.
    #[arg(long)]
    model: Option<String>,
    /// rgb, flow or both.
    #[arg(long)]
    modality: Option<String>,
    /// add or mult.
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Any other setting, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory; defaults to one named after the settings under `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse a nonempty run directory.
    #[arg(long)]
    force: bool,
}

impl RunFlags {
    fn into_args(self, extra: Vec<(&'static str, String)>) -> Result<TrainArgs> {
        let mut flags: Vec<(&str, String)> = Vec::new();
        let named = [
            ("corpus", self.corpus),
            ("cache", self.cache),
            ("runs", self.runs),
            ("model", self.model),
            ("modality", self.modality),
            ("fusion", self.fusion),
            ("seed", self.seed.map(|v| v.to_string())),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
        ];
        flags.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        let pairs: Vec<(String, String)> = self
            .set
            .iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| clstm_core::Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))
            })
            .collect::<Result<_>>()?;
        flags.extend(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())));
        flags.extend(extra);
        Ok(TrainArgs {
            rc: settings::layered(self.config.as_deref(), &flags)?,
            out: self.out,
            force: self.force,
        })
    }
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { spec, out, seed, force } => commands::gen_data(spec.as_deref(), &out, seed, force),
        Command::ExtractFlow {
            corpus,
            cache,
            window,
            levels,
            iterations,
            bound,
        } => {
            let params = FlowParams {
                window,
                pyramid_levels: levels,
                iterations,
                ..FlowParams::default()
            };
            commands::extract_flow(&corpus, &cache, &params, bound)
        }
        Command::Train {
            run,
            test_subject,
            val_subject,
        } => {
            let mut extra = Vec::new();
            if let Some(t) = test_subject {
                extra.push(("test_subject", t.to_string()));
            }
            if let Some(v) = val_subject {
                extra.push(("val_subject", v.to_string()));
            }
            commands::train(run.into_args(extra)?)
        }
        Command::Evaluate {
            run: Some(dir), ..
        } => commands::evaluate_run(&dir),
        Command::Evaluate { repeats, flags, .. } => {
            let extra = repeats.map(|r| ("repeats", r.to_string())).into_iter().collect();
            commands::crossval(flags.into_args(extra)?)
        }
        Command::Saliency {
            run,
            clip,
            start,
            class,
            method,
            untrained,
            out,
        } => commands::saliency_maps(SaliencyArgs {
            run,
            clip,
            start,
            class,
            method: match method {
                Method::TopFilter => SaliencyMethod::TopFilter,
                Method::Gradcam => SaliencyMethod::GradCam,
            },
            untrained,
            out,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
