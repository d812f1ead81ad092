//! Experiment orchestration: warmup, extractor pretraining, the interleaved
//! extractor/agent update loop, periodic evaluation, metric logging, and the
//! ablation wiring.
//!
//! Determinism contract: a `(config, seed)` pair produces a byte-identical
//! `metrics.csv` on every run of the same build. Wall-clock time therefore
//! lives in `run_meta.txt`, never in the metrics file.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::agents::{
    evaluate_policy, ActionBox, Agent, SacAgent, SacConfig, Td3Agent, Td3Config,
    matched_hidden_width, policy_param_count,
};
use crate::archsearch::{
    collect_corpus, densenet_grid, fmt_float, select_architecture, write_report_csvs,
    ScoreSettings,
};
use crate::config::{AgentKind, ArchChoice, ExperimentConfig, ExtractorKind};
use crate::defaults;
use crate::envs::make_env;
use crate::error::{LabError, Result};
use crate::extractors::{ArchSpec, Connectivity, Extractor, OfeExtractor, RawExtractor};
use crate::mlmodel::{MlModel, MlVariant};
use crate::replay::ReplayBuffer;
use crate::rng::{substream, subseed, Stream};

/// Schema version stamped into every metrics CSV.
pub const METRICS_SCHEMA: &str = "# ofelab-metrics v1";
pub const METRICS_HEADER: &str =
    "env_step,step_score,actual_score,aux_loss,critic_loss,actor_loss,alpha,status";

/// What a finished (or aborted) run leaves behind.
#[derive(Debug)]
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub rows: usize,
    pub final_step_score: Option<f64>,
    pub best_step_score: Option<f64>,
    pub steps_run: usize,
    pub reached_stop: bool,
}

/// Resolved per-run wiring after ablations are applied.
pub struct RunWiring {
    pub extractor: Box<dyn Extractor>,
    pub agent_hidden: Vec<usize>,
    /// agent gradients flow into the extractor (`no_aux`)
    pub attached: bool,
    /// standalone auxiliary updates happen in the main loop
    pub aux_online: bool,
    /// auxiliary pretraining happens after warmup
    pub pretrain: bool,
    /// extractor parameters must stay bit-identical after pretraining
    pub frozen: bool,
}

fn resolved_arch(cfg: &ExperimentConfig, obs_dim: usize, action_dim: usize, excluded: &[usize]) -> Result<ArchSpec> {
    match &cfg.arch {
        ArchChoice::Fixed {
            connectivity,
            layers,
            activation,
        } => Ok(ArchSpec::new(
            *connectivity,
            *layers,
            cfg.increment,
            *activation,
            cfg.batch_norm && !cfg.ablations.no_bn,
            obs_dim,
            action_dim,
        )
        .mask_out(excluded)),
        ArchChoice::Auto => Err(LabError::Config(
            "arch = auto must be resolved by the caller before wiring".into(),
        )),
    }
}

/// Build the extractor and agent shape for one run, applying the ablation
/// switches.
pub fn wire_run(
    cfg: &ExperimentConfig,
    seed: u64,
    obs_dim: usize,
    action_dim: usize,
    excluded: &[usize],
) -> Result<RunWiring> {
    let ext_seed = subseed(seed, Stream::Extractor, 0);
    let mut agent_hidden = defaults::AGENT_HIDDEN.to_vec();
    let kind = if cfg.ablations.same_params {
        ExtractorKind::Raw
    } else {
        cfg.extractor
    };

    if cfg.ablations.same_params {
        // widen the agent so its policy network absorbs the parameter budget
        // of the extractor-fed configuration it replaces
        let spec = resolved_arch(cfg, obs_dim, action_dim, excluded)?;
        let companion = OfeExtractor::build(spec, ext_seed, defaults::LEARNING_RATE)?;
        let target = companion.param_count().phi_o_total
            + policy_param_count(companion.z_o_dim(), &agent_hidden, action_dim);
        let w = matched_hidden_width(obs_dim, action_dim, agent_hidden.len(), target);
        agent_hidden = vec![w; agent_hidden.len()];
    }

    let extractor: Box<dyn Extractor> = match kind {
        ExtractorKind::Raw => Box::new(RawExtractor::new(obs_dim, action_dim)),
        ExtractorKind::Ofe => {
            let spec = resolved_arch(cfg, obs_dim, action_dim, excluded)?;
            Box::new(OfeExtractor::build(spec, ext_seed, defaults::LEARNING_RATE)?)
        }
        ExtractorKind::MlThird => Box::new(MlModel::build(
            obs_dim,
            action_dim,
            MlVariant::Third,
            defaults::ML_HIDDEN,
            defaults::ML_LAMBDA,
            defaults::ML_LEARNING_RATE,
            ext_seed,
        )?),
        ExtractorKind::MlOfeLike => Box::new(MlModel::build(
            obs_dim,
            action_dim,
            MlVariant::OfeLike {
                total_increment: cfg.increment,
            },
            defaults::ML_HIDDEN,
            defaults::ML_LAMBDA,
            defaults::ML_LEARNING_RATE,
            ext_seed,
        )?),
    };

    let has_aux = !matches!(kind, ExtractorKind::Raw);
    let no_aux = cfg.ablations.no_aux;
    let frozen = cfg.ablations.freeze_ofe;
    let mut wiring = RunWiring {
        extractor,
        agent_hidden,
        attached: no_aux && has_aux && !frozen,
        aux_online: has_aux && !no_aux && !frozen,
        pretrain: has_aux && !no_aux,
        frozen,
    };
    if wiring.attached {
        wiring.extractor.enable_rl_updates(defaults::LEARNING_RATE)?;
    }
    Ok(wiring)
}

enum AnyAgent {
    Sac(SacAgent),
    Td3(Td3Agent),
}

impl AnyAgent {
    fn as_policy(&mut self) -> &mut dyn crate::agents::Policy {
        match self {
            AnyAgent::Sac(a) => a,
            AnyAgent::Td3(a) => a,
        }
    }

    fn update(
        &mut self,
        ext: &mut dyn Extractor,
        batch: &crate::replay::Batch,
        attached: bool,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> Result<crate::agents::UpdateDiag> {
        match self {
            AnyAgent::Sac(a) => a.update(ext, batch, attached, rng),
            AnyAgent::Td3(a) => a.update(ext, batch, attached, rng),
        }
    }

    fn store_bytes(&self) -> Vec<u8> {
        match self {
            AnyAgent::Sac(a) => a.store().to_bytes(),
            AnyAgent::Td3(a) => a.store().to_bytes(),
        }
    }
}

/// Resolve `arch = auto` by scoring the densenet grid on a fresh
/// random-policy corpus; writes the score CSVs next to the run outputs.
pub fn resolve_auto_arch(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentConfig> {
    if cfg.arch != ArchChoice::Auto {
        return Ok(cfg.clone());
    }
    if cfg.extractor != ExtractorKind::Ofe {
        return Err(LabError::Config(
            "arch = auto only applies to the ofe extractor".into(),
        ));
    }
    let mut env = make_env(&cfg.env)?;
    let excluded = env.external_force_mask();
    let spec = env.spec().clone();
    let corpus = collect_corpus(
        env.as_mut(),
        cfg.corpus_train,
        cfg.corpus_test,
        subseed(seed, Stream::Corpus, 7),
    )?;
    let candidates = densenet_grid(spec.obs_dim, spec.action_dim, cfg.increment, &excluded);
    let settings = ScoreSettings {
        n_seeds: cfg.search_seeds,
        train_steps: cfg.search_train_steps,
        batch_size: cfg.batch_size,
        lr: defaults::LEARNING_RATE,
        parallel: false,
    };
    let report = select_architecture(&candidates, &corpus, &settings, seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_report_csvs(&report, &cfg.out_dir)?;
    let chosen = report.selected_spec();
    let mut resolved = cfg.clone();
    resolved.arch = ArchChoice::Fixed {
        connectivity: chosen.connectivity,
        layers: chosen.layers_per_block,
        activation: chosen.activation,
    };
    Ok(resolved)
}

struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    fn new() -> Self {
        MetricsLog {
            lines: vec![METRICS_SCHEMA.to_string(), METRICS_HEADER.to_string()],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push_row(
        &mut self,
        env_step: usize,
        step_score: Option<f64>,
        actual: Option<f64>,
        aux: Option<f64>,
        critic: Option<f64>,
        actor: Option<f64>,
        alpha: Option<f64>,
        status: &str,
    ) {
        let cell = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
        self.lines.push(format!(
            "{},{},{},{},{},{},{},{}",
            env_step,
            cell(step_score),
            cell(actual),
            cell(aux),
            cell(critic),
            cell(actor),
            cell(alpha),
            status
        ));
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Execute one run: warmup, pretraining, the main interleaved loop,
/// periodic evaluation, metric and snapshot emission.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let started = Instant::now();
    let cfg = resolve_auto_arch(cfg, seed)?;
    let run_dir = cfg.out_dir.join(format!("seed{seed}"));
    std::fs::create_dir_all(&run_dir)?;
    let metrics_path = run_dir.join("metrics.csv");

    let mut env = make_env(&cfg.env)?;
    let mut eval_env = make_env(&cfg.env)?;
    let spec = env.spec().clone();
    spec.validate()?;
    let excluded = env.external_force_mask();

    let mut wiring = wire_run(&cfg, seed, spec.obs_dim, spec.action_dim, &excluded)?;
    let ext = wiring.extractor.as_mut();
    let action_box = ActionBox {
        low: spec.action_low.clone(),
        high: spec.action_high.clone(),
    };
    let agent_seed = subseed(seed, Stream::Agent, 0);
    let mut agent = match cfg.agent {
        AgentKind::Sac => AnyAgent::Sac(SacAgent::new(
            ext.z_o_dim(),
            ext.z_oa_dim(),
            action_box.clone(),
            SacConfig {
                hidden: wiring.agent_hidden.clone(),
                ..SacConfig::default()
            },
            agent_seed,
        )),
        AgentKind::Td3 => AnyAgent::Td3(Td3Agent::new(
            ext.z_o_dim(),
            ext.z_oa_dim(),
            action_box.clone(),
            Td3Config {
                hidden: wiring.agent_hidden.clone(),
                ..Td3Config::default()
            },
            agent_seed,
        )),
    };

    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, spec.obs_dim, spec.action_dim);
    let mut rng_env = substream(seed, Stream::Env, 0);
    let mut rng_warm = substream(seed, Stream::Warmup, 0);
    let mut rng_aux = substream(seed, Stream::ReplayAux, 0);
    let mut rng_agent_replay = substream(seed, Stream::ReplayAgent, 0);
    let mut rng_agent = substream(seed, Stream::Agent, 1);

    // (1) warmup: random policy fills the buffer
    let mut obs = env.reset(rng_env.gen());
    for _ in 0..cfg.warmup_steps {
        let action: Vec<f64> = spec
            .action_low
            .iter()
            .zip(spec.action_high.iter())
            .map(|(&l, &h)| rng_warm.gen_range(l..h))
            .collect();
        let t = env.step(&action)?;
        let finished = t.done || t.truncated;
        obs = t.next_obs.clone();
        buffer.push(t)?;
        if finished {
            obs = env.reset(rng_env.gen());
        }
    }

    // (2) extractor pretraining on warmup data
    if wiring.pretrain {
        for _ in 0..cfg.pretrain_steps() {
            let batch = buffer.sample(cfg.batch_size, &mut rng_aux)?;
            ext.aux_update(&batch)?;
        }
    }
    let frozen_bytes = wiring.frozen.then(|| ext.store().to_bytes());

    // (3) main loop
    let mut log = MetricsLog::new();
    let mut window = VecDeque::new();
    let window_len = (cfg.actual_score_window / cfg.eval_interval).max(1);
    let mut aux_acc = MeanAcc::default();
    let mut critic_acc = MeanAcc::default();
    let mut actor_acc = MeanAcc::default();
    let mut last_alpha = None;
    let mut eval_idx = 0u64;
    let mut final_step_score = None;
    let mut best_step_score: Option<f64> = None;
    let mut reached_stop = false;
    let mut steps_run = cfg.warmup_steps;

    let outcome: Result<()> = (|| {
        for t in cfg.warmup_steps..cfg.total_steps {
            let action = agent.as_policy().act(ext, &obs, true, &mut rng_agent)?;
            let tr = env.step(&action)?;
            let finished = tr.done || tr.truncated;
            obs = tr.next_obs.clone();
            buffer.push(tr)?;
            if finished {
                obs = env.reset(rng_env.gen());
            }

            if wiring.aux_online {
                let batch = buffer.sample(cfg.batch_size, &mut rng_aux)?;
                if let Some(loss) = ext.aux_update(&batch)? {
                    aux_acc.push(loss);
                }
            }

            // distinct draw for the agent update
            let batch = buffer.sample(cfg.batch_size, &mut rng_agent_replay)?;
            let diag = agent.update(ext, &batch, wiring.attached, &mut rng_agent)?;
            critic_acc.push(diag.critic_loss);
            if let Some(a) = diag.actor_loss {
                actor_acc.push(a);
            }
            if diag.alpha.is_some() {
                last_alpha = diag.alpha;
            }
            steps_run = t + 1;

            if (t + 1) % cfg.eval_interval == 0 {
                let mut rng_eval = substream(seed, Stream::Eval, eval_idx);
                eval_idx += 1;
                let score = evaluate_policy(
                    agent.as_policy(),
                    ext,
                    eval_env.as_mut(),
                    cfg.eval_episodes,
                    &mut rng_eval,
                )?;
                window.push_back(score);
                if window.len() > window_len {
                    window.pop_front();
                }
                let actual = (window.len() == window_len)
                    .then(|| window.iter().sum::<f64>() / window.len() as f64);
                log.push_row(
                    t + 1,
                    Some(score),
                    actual,
                    aux_acc.take(),
                    critic_acc.take(),
                    actor_acc.take(),
                    last_alpha,
                    "ok",
                );
                final_step_score = Some(score);
                best_step_score = Some(best_step_score.map_or(score, |b: f64| b.max(score)));
                if let Some(threshold) = cfg.stop_at_step_score {
                    if score >= threshold {
                        reached_stop = true;
                        return Ok(());
                    }
                }
            }
        }
        Ok(())
    })();

    // (4) snapshots and metric emission, also on divergence
    if let Err(e) = &outcome {
        if matches!(e, LabError::Numeric(_)) {
            log.push_row(steps_run, None, None, None, None, None, None, "diverged");
        }
    }
    std::fs::write(run_dir.join("extractor.params"), ext.store().to_bytes())?;
    std::fs::write(run_dir.join("agent.params"), agent.store_bytes())?;
    log.write(&metrics_path)?;
    let meta = format!(
        "{}\nseed: {seed}\nsteps_run: {steps_run}\nwall_time_s: {:.3}\noutcome: {}\n",
        cfg.echo(),
        started.elapsed().as_secs_f64(),
        match &outcome {
            Ok(()) if reached_stop => "reached_stop".to_string(),
            Ok(()) => "completed".to_string(),
            Err(e) => format!("aborted: {e}"),
        }
    );
    std::fs::write(run_dir.join("run_meta.txt"), meta)?;

    if let Some(before) = frozen_bytes {
        if ext.store().to_bytes() != before {
            return Err(LabError::Numeric(
                "frozen extractor parameters changed during the run".into(),
            ));
        }
    }
    outcome?;
    Ok(RunArtifacts {
        metrics_path,
        rows: log.lines.len() - 2,
        final_step_score,
        best_step_score,
        steps_run,
        reached_stop,
    })
}

/// Run every seed in the config sequentially.
pub fn run_all_seeds(cfg: &ExperimentConfig) -> Result<Vec<RunArtifacts>> {
    cfg.seeds.iter().map(|&s| run_experiment(cfg, s)).collect()
}

/// One run per hidden width at fixed depth 8; emits a summary CSV
/// (width, seed, final and best step score).
pub fn dim_sweep(cfg: &ExperimentConfig, widths: &[usize]) -> Result<PathBuf> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(LabError::Config("dim sweep widths must be positive".into()));
    }
    const SWEEP_DEPTH: usize = 8;
    let mut rows = Vec::new();
    for &w in widths {
        let mut sub = cfg.clone();
        sub.extractor = ExtractorKind::Ofe;
        sub.increment = SWEEP_DEPTH * w;
        sub.arch = match &cfg.arch {
            ArchChoice::Fixed { connectivity, activation, .. } => ArchChoice::Fixed {
                connectivity: *connectivity,
                layers: SWEEP_DEPTH,
                activation: *activation,
            },
            ArchChoice::Auto => ArchChoice::Fixed {
                connectivity: Connectivity::Densenet,
                layers: SWEEP_DEPTH,
                activation: gradkit::Activation::Swish,
            },
        };
        sub.out_dir = cfg.out_dir.join(format!("width{w}"));
        for art in run_all_seeds(&sub)? {
            rows.push((w, art));
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("dim_sweep.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "width,final_step_score,best_step_score")?;
    for (w, art) in &rows {
        writeln!(
            f,
            "{},{},{}",
            w,
            art.final_step_score.map(fmt_float).unwrap_or_default(),
            art.best_step_score.map(fmt_float).unwrap_or_default(),
        )?;
    }
    Ok(path)
}

#[derive(Default)]
struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn take(&mut self) -> Option<f64> {
        if self.n == 0 {
            return None;
        }
        let m = self.sum / self.n as f64;
        self.sum = 0.0;
        self.n = 0;
        Some(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(dir: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.env = "linsys".into();
        cfg.extractor = ExtractorKind::Raw;
        cfg.total_steps = 600;
        cfg.warmup_steps = 300;
        cfg.eval_interval = 100;
        cfg.eval_episodes = 2;
        cfg.actual_score_window = 300;
        cfg.batch_size = 32;
        cfg.seeds = vec![0];
        cfg.out_dir = std::env::temp_dir().join("ofelab_runner_tests").join(dir);
        cfg
    }

    #[test]
    fn run_emits_one_row_per_evaluation_with_monotone_steps() {
        let cfg = quick_cfg("rows");
        let art = run_experiment(&cfg, 0).unwrap();
        assert_eq!(art.rows, (600 - 300) / 100);
        let text = std::fs::read_to_string(&art.metrics_path).unwrap();
        let steps: Vec<usize> = text
            .lines()
            .skip(2)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(steps, vec![400, 500, 600]);
    }

    #[test]
    fn identical_seeds_give_byte_identical_metrics() {
        let mut cfg = quick_cfg("det_a");
        cfg.extractor = ExtractorKind::Ofe;
        cfg.increment = 8;
        let a = run_experiment(&cfg, 3).unwrap();
        let first = std::fs::read(&a.metrics_path).unwrap();
        cfg.out_dir = std::env::temp_dir().join("ofelab_runner_tests").join("det_b");
        let b = run_experiment(&cfg, 3).unwrap();
        let second = std::fs::read(&b.metrics_path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn freeze_keeps_extractor_parameters_bit_identical() {
        let mut cfg = quick_cfg("freeze");
        cfg.extractor = ExtractorKind::Ofe;
        cfg.increment = 8;
        cfg.ablations.freeze_ofe = true;
        run_experiment(&cfg, 1).unwrap();
    }

    #[test]
    fn no_aux_changes_extractor_parameters_through_agent_gradients() {
        let mut cfg = quick_cfg("noaux");
        cfg.extractor = ExtractorKind::Ofe;
        cfg.increment = 8;
        cfg.ablations.no_aux = true;
        let env = make_env(&cfg.env).unwrap();
        let spec = env.spec().clone();
        let excluded = env.external_force_mask();
        let wiring = wire_run(&cfg, 0, spec.obs_dim, spec.action_dim, &excluded).unwrap();
        assert!(wiring.attached);
        assert!(!wiring.aux_online);
        assert!(!wiring.pretrain);
        // end to end: extractor parameters move despite zero aux updates
        let before = wiring.extractor.store().to_bytes();
        drop(wiring);
        run_experiment(&cfg, 0).unwrap();
        let after = std::fs::read(cfg.out_dir.join("seed0").join("extractor.params")).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn same_params_reproduces_the_published_width_at_full_scale() {
        // policy budget: phi_o block (51840) plus the 351-input policy head
        let target = 51840 + policy_param_count(351, &[256, 256], 8);
        assert_eq!(target, 209_800);
        let w = matched_hidden_width(111, 8, 2, target);
        assert_eq!(w, 401);
    }

    #[test]
    fn same_params_wiring_matches_totals_at_desk_scale() {
        let mut cfg = quick_cfg("sameparams");
        cfg.env = "pendulum".into();
        cfg.extractor = ExtractorKind::Ofe;
        cfg.increment = 32;
        cfg.ablations.same_params = true;
        let wiring = wire_run(&cfg, 0, 3, 1, &[]).unwrap();
        assert_eq!(wiring.extractor.z_o_dim(), 3, "same_params uses the raw extractor");
        let w = wiring.agent_hidden[0];
        let spec = ArchSpec::new(
            Connectivity::Densenet,
            2,
            32,
            gradkit::Activation::Swish,
            true,
            3,
            1,
        );
        let companion = OfeExtractor::build(spec, subseed(0, Stream::Extractor, 0), 3e-4).unwrap();
        let target =
            companion.param_count().phi_o_total + policy_param_count(35, &[256, 256], 1);
        let achieved = policy_param_count(3, &[w, w], 1);
        assert!(achieved <= target);
        // within one layer's bias count of the budget
        assert!(target - achieved <= w, "gap {} > bias count {}", target - achieved, w);
    }

    #[test]
    fn dim_sweep_produces_a_row_per_width() {
        let mut cfg = quick_cfg("dims");
        cfg.extractor = ExtractorKind::Ofe;
        cfg.total_steps = 400;
        cfg.warmup_steps = 200;
        cfg.eval_interval = 200;
        cfg.actual_score_window = 200;
        let path = dim_sweep(&cfg, &[1, 2]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 3);
        // densenet arithmetic: depth 8, width w adds 8w dims
        let spec = ArchSpec::new(
            Connectivity::Densenet,
            8,
            8 * 2,
            gradkit::Activation::Swish,
            true,
            4,
            2,
        );
        assert_eq!(spec.z_o_dim(), 4 + 16);
    }

    #[test]
    fn aux_and_agent_batches_come_from_distinct_draws() {
        let mut r1 = substream(5, Stream::ReplayAux, 0);
        let mut r2 = substream(5, Stream::ReplayAgent, 0);
        let mut buf = ReplayBuffer::new(64, 1, 1);
        for i in 0..64 {
            buf.push(crate::envs::Transition {
                obs: vec![i as f64],
                action: vec![0.0],
                next_obs: vec![0.0],
                reward: 0.0,
                done: false,
                truncated: false,
            })
            .unwrap();
        }
        let b1 = buf.sample(16, &mut r1).unwrap();
        let b2 = buf.sample(16, &mut r2).unwrap();
        assert_ne!(b1.obs.data(), b2.obs.data());
    }
}
