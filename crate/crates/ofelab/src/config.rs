//! Experiment configuration: a flat `key = value` text format with CLI
//! overrides.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! See the README for the full key list. Example:
//!
//! ```text
//! env = pendulum
//! agent = sac
//! extractor = ofe
//! connectivity = densenet
//! layers = 2
//! increment = 32
//! activation = swish
//! seeds = 0,1,2
//! total_steps = 30000
//! out_dir = runs/demo
//! ```

use std::path::PathBuf;

use gradkit::Activation;

use crate::defaults;
use crate::error::{LabError, Result};
use crate::extractors::Connectivity;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Sac,
    Td3,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Sac => "sac",
            AgentKind::Td3 => "td3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    Ofe,
    Raw,
    MlThird,
    MlOfeLike,
}

impl ExtractorKind {
    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::Ofe => "ofe",
            ExtractorKind::Raw => "raw",
            ExtractorKind::MlThird => "ml_third",
            ExtractorKind::MlOfeLike => "ml_ofelike",
        }
    }
}

/// Architecture choice: fixed, or selected by the auxiliary-score sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchChoice {
    Fixed {
        connectivity: Connectivity,
        layers: usize,
        activation: Activation,
    },
    Auto,
}

#[derive(Debug, Clone, Default)]
pub struct Ablations {
    pub no_bn: bool,
    pub no_aux: bool,
    pub same_params: bool,
    pub freeze_ofe: bool,
    pub dim_sweep: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: String,
    pub agent: AgentKind,
    pub extractor: ExtractorKind,
    pub arch: ArchChoice,
    pub increment: usize,
    pub batch_norm: bool,
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// extractor pretraining steps after warmup; defaults to `warmup_steps`
    pub pretrain_steps: Option<usize>,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// trailing window for the actual score, in environment steps
    pub actual_score_window: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub ablations: Ablations,
    pub out_dir: PathBuf,
    /// stop a run early once an evaluation reaches this step score
    pub stop_at_step_score: Option<f64>,
    // auxiliary-score sweep settings (used when arch = auto and by sweep-arch)
    pub search_seeds: usize,
    pub search_train_steps: usize,
    pub corpus_train: usize,
    pub corpus_test: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "pendulum".into(),
            agent: AgentKind::Sac,
            extractor: ExtractorKind::Ofe,
            arch: ArchChoice::Fixed {
                connectivity: Connectivity::Densenet,
                layers: 2,
                activation: Activation::Swish,
            },
            increment: 32,
            batch_norm: true,
            seeds: vec![0],
            total_steps: 30_000,
            warmup_steps: defaults::DESK_WARMUP,
            pretrain_steps: None,
            eval_interval: defaults::DESK_EVAL_INTERVAL,
            eval_episodes: defaults::DESK_EVAL_EPISODES,
            actual_score_window: defaults::DESK_ACTUAL_SCORE_WINDOW,
            buffer_capacity: defaults::DESK_BUFFER_CAPACITY,
            batch_size: defaults::BATCH_SIZE,
            ablations: Ablations::default(),
            out_dir: PathBuf::from("runs/out"),
            stop_at_step_score: None,
            search_seeds: 5,
            search_train_steps: defaults::DESK_AUX_TRAIN_STEPS,
            corpus_train: defaults::DESK_CORPUS_TRAIN,
            corpus_test: defaults::DESK_CORPUS_TEST,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LabError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env" => self.env = value.to_string(),
            "agent" => {
                self.agent = match value {
                    "sac" => AgentKind::Sac,
                    "td3" => AgentKind::Td3,
                    _ => return Err(LabError::Config(format!("unknown agent {value:?}"))),
                }
            }
            "extractor" => {
                self.extractor = match value {
                    "ofe" => ExtractorKind::Ofe,
                    "raw" => ExtractorKind::Raw,
                    "ml_third" => ExtractorKind::MlThird,
                    "ml_ofelike" => ExtractorKind::MlOfeLike,
                    _ => return Err(LabError::Config(format!("unknown extractor {value:?}"))),
                }
            }
            "arch" => {
                if value == "auto" {
                    self.arch = ArchChoice::Auto;
                } else {
                    return Err(LabError::Config(
                        "arch only accepts `auto`; use connectivity/layers/activation keys"
                            .into(),
                    ));
                }
            }
            "connectivity" => {
                let connectivity = Connectivity::parse(value)?;
                self.arch = match self.arch.clone() {
                    ArchChoice::Fixed { layers, activation, .. } => ArchChoice::Fixed {
                        connectivity,
                        layers,
                        activation,
                    },
                    ArchChoice::Auto => ArchChoice::Fixed {
                        connectivity,
                        layers: 2,
                        activation: Activation::Swish,
                    },
                };
            }
            "layers" => {
                let layers = parse_num(key, value)?;
                self.arch = match self.arch.clone() {
                    ArchChoice::Fixed { connectivity, activation, .. } => ArchChoice::Fixed {
                        connectivity,
                        layers,
                        activation,
                    },
                    ArchChoice::Auto => ArchChoice::Fixed {
                        connectivity: Connectivity::Densenet,
                        layers,
                        activation: Activation::Swish,
                    },
                };
            }
            "activation" => {
                let activation = Activation::parse(value).map_err(LabError::from)?;
                self.arch = match self.arch.clone() {
                    ArchChoice::Fixed { connectivity, layers, .. } => ArchChoice::Fixed {
                        connectivity,
                        layers,
                        activation,
                    },
                    ArchChoice::Auto => ArchChoice::Fixed {
                        connectivity: Connectivity::Densenet,
                        layers: 2,
                        activation,
                    },
                };
            }
            "increment" => self.increment = parse_num(key, value)?,
            "batch_norm" => self.batch_norm = parse_bool(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<u64>()
                            .map_err(|_| LabError::Config(format!("bad seed {s:?}")))
                    })
                    .collect::<Result<Vec<u64>>>()?;
            }
            "total_steps" => self.total_steps = parse_num(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, value)?,
            "pretrain_steps" => self.pretrain_steps = Some(parse_num(key, value)?),
            "eval_interval" => self.eval_interval = parse_num(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, value)?,
            "actual_score_window" => self.actual_score_window = parse_num(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "no_bn" => self.ablations.no_bn = parse_bool(key, value)?,
            "no_aux" => self.ablations.no_aux = parse_bool(key, value)?,
            "same_params" => self.ablations.same_params = parse_bool(key, value)?,
            "freeze_ofe" => self.ablations.freeze_ofe = parse_bool(key, value)?,
            "dim_sweep" => {
                self.ablations.dim_sweep = value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| LabError::Config(format!("bad width {s:?}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "stop_at_step_score" => {
                self.stop_at_step_score = Some(value.parse::<f64>().map_err(|_| {
                    LabError::Config(format!("bad stop_at_step_score {value:?}"))
                })?)
            }
            "search_seeds" => self.search_seeds = parse_num(key, value)?,
            "search_train_steps" => self.search_train_steps = parse_num(key, value)?,
            "corpus_train" => self.corpus_train = parse_num(key, value)?,
            "corpus_test" => self.corpus_test = parse_num(key, value)?,
            other => return Err(LabError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(LabError::Config("need at least one seed".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(LabError::Config(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.eval_interval == 0 || self.total_steps % self.eval_interval != 0 {
            return Err(LabError::Config(format!(
                "eval_interval {} must divide total_steps {}",
                self.eval_interval, self.total_steps
            )));
        }
        if self.actual_score_window % self.eval_interval != 0 {
            return Err(LabError::Config(format!(
                "actual_score_window {} must be a multiple of eval_interval {}",
                self.actual_score_window, self.eval_interval
            )));
        }
        if self.batch_size < 2 {
            return Err(LabError::Config("batch_size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn pretrain_steps(&self) -> usize {
        self.pretrain_steps.unwrap_or(self.warmup_steps)
    }

    /// One-line echo of the effective configuration, for run metadata.
    pub fn echo(&self) -> String {
        let arch = match &self.arch {
            ArchChoice::Auto => "auto".to_string(),
            ArchChoice::Fixed {
                connectivity,
                layers,
                activation,
            } => format!("{}/{}l/{}", connectivity.name(), layers, activation.name()),
        };
        format!(
            "env={} agent={} extractor={} arch={} increment={} batch_norm={} total_steps={} warmup={} pretrain={} eval_interval={} ablations[no_bn={} no_aux={} same_params={} freeze_ofe={}]",
            self.env,
            self.agent.name(),
            self.extractor.name(),
            arch,
            self.increment,
            self.batch_norm,
            self.total_steps,
            self.warmup_steps,
            self.pretrain_steps(),
            self.eval_interval,
            self.ablations.no_bn,
            self.ablations.no_aux,
            self.ablations.same_params,
            self.ablations.freeze_ofe,
        )
    }
}

fn parse_num(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| LabError::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(LabError::Config(format!("bad boolean for {key}: {value:?}"))),
    }
}
