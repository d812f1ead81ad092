//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ofelab::archsearch::{
    collect_corpus, densenet_grid, full_grid, select_architecture, write_report_csvs,
    ScoreSettings,
};
use ofelab::config::ExperimentConfig;
use ofelab::envs::make_env;
use ofelab::error::{LabError, Result};
use ofelab::plot::{emit_plots, PlotGroup};
use ofelab::replay::dump_transitions;
use ofelab::runner::{dim_sweep, run_all_seeds, run_experiment};

#[derive(Parser)]
#[command(name = "ofelab", about = "Online feature extraction RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// flat key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// override a config key, e.g. --set total_steps=5000 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                LabError::Config(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment for every configured seed
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// run only this seed instead of the configured list
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score extractor architectures by auxiliary loss on a random-policy corpus
    SweepArch {
        #[command(flatten)]
        config: ConfigArgs,
        /// widen the candidate grid to all three connectivities (60 specs)
        #[arg(long)]
        full: bool,
        /// score candidates on worker threads
        #[arg(long)]
        parallel: bool,
    },
    /// Run one experiment per extractor width at fixed depth 8
    SweepDim {
        #[command(flatten)]
        config: ConfigArgs,
        /// per-layer widths, e.g. 4,16,64 (falls back to the config's dim_sweep)
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
    },
    /// Run with one ablation switch enabled
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// one of: no_bn, no_aux, same_params, freeze_ofe
        #[arg(long)]
        flag: String,
    },
    /// Render mean +/- std learning curves from metrics CSVs
    Plot {
        /// output directory for the SVG files
        #[arg(long)]
        out: PathBuf,
        /// metrics to render
        #[arg(long, value_delimiter = ',', default_values_t = vec!["step_score".to_string()])]
        metrics: Vec<String>,
        /// repeatable: LABEL=path1,path2,...
        #[arg(long = "group", value_name = "LABEL=CSV,...")]
        groups: Vec<String>,
    },
    /// Collect a random-policy corpus and dump it as binary transition files
    CollectCorpus {
        /// environment name
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = ofelab::defaults::DESK_CORPUS_TRAIN)]
        train: usize,
        #[arg(long, default_value_t = ofelab::defaults::DESK_CORPUS_TEST)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// output prefix; writes <out>_train.bin and <out>_test.bin
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed } => {
            let cfg = config.load()?;
            let arts = match seed {
                Some(s) => vec![run_experiment(&cfg, s)?],
                None => run_all_seeds(&cfg)?,
            };
            for (k, art) in arts.iter().enumerate() {
                println!(
                    "seed {}: {} rows -> {}{}",
                    cfg.seeds.get(k).copied().unwrap_or_default(),
                    art.rows,
                    art.metrics_path.display(),
                    if art.reached_stop { " (reached stop threshold)" } else { "" }
                );
            }
            Ok(())
        }
        Command::SweepArch {
            config,
            full,
            parallel,
        } => {
            let cfg = config.load()?;
            let mut env = make_env(&cfg.env)?;
            let excluded = env.external_force_mask();
            let spec = env.spec().clone();
            let corpus = collect_corpus(
                env.as_mut(),
                cfg.corpus_train,
                cfg.corpus_test,
                cfg.seeds[0],
            )?;
            let candidates = if full {
                full_grid(spec.obs_dim, spec.action_dim, cfg.increment, &excluded)
            } else {
                densenet_grid(spec.obs_dim, spec.action_dim, cfg.increment, &excluded)
            };
            let settings = ScoreSettings {
                n_seeds: cfg.search_seeds,
                train_steps: cfg.search_train_steps,
                batch_size: cfg.batch_size,
                lr: ofelab::defaults::LEARNING_RATE,
                parallel,
            };
            let report = select_architecture(&candidates, &corpus, &settings, cfg.seeds[0])?;
            let (per_seed, summary) = write_report_csvs(&report, &cfg.out_dir)?;
            let chosen = report.selected_spec();
            println!(
                "selected: {} ({} layers, {}) -> {} / {}",
                chosen.connectivity.name(),
                chosen.layers_per_block,
                chosen.activation.name(),
                per_seed.display(),
                summary.display()
            );
            Ok(())
        }
        Command::SweepDim { config, widths } => {
            let cfg = config.load()?;
            let widths = if widths.is_empty() {
                cfg.ablations.dim_sweep.clone()
            } else {
                widths
            };
            let path = dim_sweep(&cfg, &widths)?;
            println!("summary -> {}", path.display());
            Ok(())
        }
        Command::Ablate { config, flag } => {
            let mut cfg = config.load()?;
            cfg.set(&flag, "true")?;
            cfg.out_dir = cfg.out_dir.join(&flag);
            for art in run_all_seeds(&cfg)? {
                println!("{} rows -> {}", art.rows, art.metrics_path.display());
            }
            Ok(())
        }
        Command::Plot {
            out,
            metrics,
            groups,
        } => {
            let groups: Vec<PlotGroup> = groups
                .iter()
                .map(|spec| {
                    let (label, paths) = spec.split_once('=').ok_or_else(|| {
                        LabError::Config(format!("--group expects LABEL=CSV,..., got {spec:?}"))
                    })?;
                    Ok(PlotGroup {
                        label: label.to_string(),
                        csv_paths: paths.split(',').map(PathBuf::from).collect(),
                    })
                })
                .collect::<Result<_>>()?;
            let metric_refs: Vec<&str> = metrics.iter().map(|s| s.as_str()).collect();
            for path in emit_plots(&groups, &metric_refs, &out)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::CollectCorpus {
            env,
            train,
            test,
            seed,
            out,
        } => {
            let mut e = make_env(&env)?;
            let corpus = collect_corpus(e.as_mut(), train, test, seed)?;
            let train_path = out.with_file_name(format!(
                "{}_train.bin",
                out.file_name().unwrap_or_default().to_string_lossy()
            ));
            let test_path = out.with_file_name(format!(
                "{}_test.bin",
                out.file_name().unwrap_or_default().to_string_lossy()
            ));
            dump_transitions(&train_path, &corpus.train)?;
            dump_transitions(&test_path, &corpus.test)?;
            println!(
                "corpus digest {:016x}: {} train -> {}, {} test -> {}",
                corpus.digest(),
                corpus.train.len(),
                train_path.display(),
                corpus.test.len(),
                test_path.display()
            );
            Ok(())
        }
    }
}
