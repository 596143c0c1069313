//! Command-line pipeline: configuration resolution, training runs,
//! evaluation, comparison, verification and the identification self-test.
//!
//! Configuration resolves as defaults < `--config` file < `--set` overrides
//! < dedicated flags. Every run directory receives the fully resolved
//! config as `config.resolved`, which can be fed back through `--config`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, write_train_log, AgentError, GainSidecar, TrainConfig};
use crate::envs::{normalized_q, BoxSet, EnvError, EnvSpec, Plant, DEFAULT_EPISODE_CAP};
use crate::eval::{self, compare_costs, sample_starts, Controller, RoaOptions};
use crate::nn::GaussianPolicy;
use crate::numerics::Matrix;
use crate::rng::{stream, Stream};
use crate::sysid::{identify_by_simulation, write_sysid_report};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const POLICY_FILE: &str = "policy.json";
pub const GAIN_FILE: &str = "gain.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SYSID_REPORT_FILE: &str = "sysid_report.csv";
pub const TRAIN_META_FILE: &str = "train_meta.json";
pub const ERROR_FILE: &str = "error.txt";
pub const COST_CURVE_FILE: &str = "cost_curve.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ROA_REPORT_FILE: &str = "roa_report.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn from_rows(key: &str, rows: &[Vec<f64>]) -> Result<Matrix, CliError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Validation(format!("`{key}` rows have unequal lengths")));
    }
    Matrix::new(rows.len(), cols, rows.concat()).map_err(|e| CliError::Validation(format!("`{key}`: {e}")))
}

/// Environment block. Empty matrices are filled in during resolution:
/// `q_reward` from the domain, `a`/`b` from the default linear plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default)]
    pub name: String,
    pub dt: f64,
    pub domain: BoxSet,
    pub action_bounds: BoxSet,
    pub init_box: BoxSet,
    #[serde(default)]
    pub q_reward: Vec<Vec<f64>>,
    pub r_const: f64,
    pub terminal_penalty: f64,
    pub reward_scale: f64,
    pub max_episode_steps: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Vec<Vec<f64>>,
}

impl EnvConfig {
    pub fn from_spec(spec: &EnvSpec) -> Self {
        let (a, b) = match &spec.plant {
            Plant::Linear { a, b } => (to_rows(a), to_rows(b)),
            _ => (Vec::new(), Vec::new()),
        };
        Self {
            name: spec.name.clone(),
            dt: spec.dt,
            domain: spec.domain.clone(),
            action_bounds: spec.action_bounds.clone(),
            init_box: spec.init_box.clone(),
            q_reward: to_rows(&spec.q_reward),
            r_const: spec.r_const,
            terminal_penalty: spec.terminal_penalty,
            reward_scale: spec.reward_scale,
            max_episode_steps: spec.max_episode_steps,
            params: spec.plant.params(),
            a,
            b,
        }
    }

    pub fn to_spec(&self) -> Result<EnvSpec, CliError> {
        let env_err = |e: EnvError| CliError::Validation(format!("env: {e}"));
        let mut spec = EnvSpec::by_name(&self.name).map_err(|e| CliError::Validation(format!("env.name: {e}")))?;
        if let Plant::Linear { .. } = spec.plant {
            spec.plant = Plant::Linear {
                a: from_rows("env.a", &self.a)?,
                b: from_rows("env.b", &self.b)?,
            };
        } else if !self.a.is_empty() || !self.b.is_empty() {
            return Err(CliError::Validation("env.a and env.b apply only to the linear plant".into()));
        }
        spec.plant.set_params(&self.params).map_err(env_err)?;
        spec.dt = self.dt;
        spec.domain = BoxSet::new(self.domain.low.clone(), self.domain.high.clone()).map_err(env_err)?;
        spec.action_bounds =
            BoxSet::new(self.action_bounds.low.clone(), self.action_bounds.high.clone()).map_err(env_err)?;
        spec.init_box = BoxSet::new(self.init_box.low.clone(), self.init_box.high.clone()).map_err(env_err)?;
        spec.q_reward = from_rows("env.q_reward", &self.q_reward)?;
        spec.r_const = self.r_const;
        spec.terminal_penalty = self.terminal_penalty;
        spec.reward_scale = self.reward_scale;
        spec.max_episode_steps = self.max_episode_steps;
        spec.validate().map_err(env_err)?;
        Ok(spec)
    }
}

/// Evaluation block. Empty cost matrices mean `env.q_reward` and `0.1·I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_starts: usize,
    pub horizon: usize,
    pub q_cost: Vec<Vec<f64>>,
    pub r_cost: Vec<Vec<f64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_starts: 50,
            horizon: DEFAULT_EPISODE_CAP,
            q_cost: Vec::new(),
            r_cost: Vec::new(),
        }
    }
}

/// Verification block. An empty `q_v` means the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub samples: usize,
    pub bisection_steps: usize,
    pub margin_scale: f64,
    pub q_v: Vec<Vec<f64>>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let roa = RoaOptions::default();
        Self {
            samples: roa.samples,
            bisection_steps: roa.bisection_steps,
            margin_scale: roa.margin_scale,
            q_v: Vec::new(),
        }
    }
}

impl VerifyConfig {
    pub fn roa_options(&self) -> RoaOptions {
        RoaOptions {
            samples: self.samples,
            bisection_steps: self.bisection_steps,
            margin_scale: self.margin_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: String,
    /// Env steps between intermediate policy checkpoints; 0 keeps only the
    /// final policy.
    pub checkpoint_every: u64,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: "runs/default".into(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn defaults_for(env_name: &str) -> Result<Self, CliError> {
        let spec = EnvSpec::by_name(env_name).map_err(|e| CliError::Validation(format!("env.name: {e}")))?;
        Ok(Self {
            seed: 0,
            env: EnvConfig::from_spec(&spec),
            train: TrainConfig::for_env(env_name),
            eval: EvalConfig::default(),
            verify: VerifyConfig::default(),
            io: IoConfig::default(),
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(runtime)
    }

    pub fn env_spec(&self) -> Result<EnvSpec, CliError> {
        self.env.to_spec()
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn eval_costs(&self, spec: &EnvSpec) -> Result<(Matrix, Matrix), CliError> {
        let q = from_rows("eval.q_cost", &self.eval.q_cost)?;
        let r = from_rows("eval.r_cost", &self.eval.r_cost)?;
        if q.shape() != (spec.state_dim(), spec.state_dim()) || r.shape() != (spec.action_dim(), spec.action_dim()) {
            return Err(CliError::Validation("eval.q_cost/eval.r_cost shapes do not match the env".into()));
        }
        Ok((q, r))
    }

    pub fn verify_q(&self, spec: &EnvSpec) -> Result<Matrix, CliError> {
        let q = from_rows("verify.q_v", &self.verify.q_v)?;
        if q.shape() != (spec.state_dim(), spec.state_dim()) {
            return Err(CliError::Validation("verify.q_v shape does not match the env".into()));
        }
        Ok(q)
    }

    /// Fills derived defaults and checks every block.
    fn complete(&mut self) -> Result<(), CliError> {
        if self.env.q_reward.is_empty() {
            self.env.q_reward = to_rows(&normalized_q(&self.env.domain));
        }
        let spec = self.env_spec()?;
        let (default_q, default_r) = eval::default_cost_matrices(&spec);
        if self.eval.q_cost.is_empty() {
            self.eval.q_cost = to_rows(&default_q);
        }
        if self.eval.r_cost.is_empty() {
            self.eval.r_cost = to_rows(&default_r);
        }
        if self.verify.q_v.is_empty() {
            self.verify.q_v = to_rows(&Matrix::identity(spec.state_dim()));
        }
        let mut bad: Vec<String> = Vec::new();
        if let Err(AgentError::InvalidConfig(keys)) = self.train_config().validate() {
            bad.extend(keys.split(", ").map(|k| format!("train.{k}")));
        }
        if self.eval.n_starts == 0 {
            bad.push("eval.n_starts".into());
        }
        if self.verify.samples == 0 {
            bad.push("verify.samples".into());
        }
        if !(self.verify.margin_scale >= 0.0) {
            bad.push("verify.margin_scale".into());
        }
        if self.io.out_dir.is_empty() {
            bad.push("io.out_dir".into());
        }
        if !bad.is_empty() {
            return Err(CliError::Validation(format!("invalid values for {}", bad.join(", "))));
        }
        self.eval_costs(&spec)?;
        self.verify_q(&spec)?;
        Ok(())
    }
}

/// Config inputs common to every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Environment name (pendulum, cartpole, quad2d, linear).
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-key override, e.g. `train.lambda_k=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{raw}` is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Validation(format!("override key `{key}` is malformed")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty override path");
    let mut cursor = table;
    for key in parents {
        let entry = cursor
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("`{}` is not a table", path.join("."))))?;
    }
    cursor.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Resolves a run config from a file, overrides and flags. `out` replaces
/// `io.out_dir` when given.
pub fn resolve_config(args: &ConfigArgs, out: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut user = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for raw in &args.set {
        let (path, value) = parse_override(raw)?;
        set_path(&mut user, &path, value)?;
    }
    if let Some(name) = &args.env {
        set_path(&mut user, &["env".into(), "name".into()], toml::Value::String(name.clone()))?;
    }
    if let Some(seed) = args.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Validation("seed exceeds i64 range".into()))?;
        set_path(&mut user, &["seed".into()], toml::Value::Integer(seed))?;
    }
    if let Some(out) = out {
        let dir = toml::Value::String(out.to_string_lossy().into_owned());
        set_path(&mut user, &["io".into(), "out_dir".into()], dir)?;
    }
    let name = match user.get("env").and_then(|e| e.get("name")) {
        Some(toml::Value::String(s)) if !s.is_empty() => s.clone(),
        Some(_) => return Err(CliError::Validation("`env.name` must be a non-empty string".into())),
        None => return Err(CliError::Validation("missing required key `env.name`".into())),
    };
    let defaults = RunConfig::defaults_for(&name)?;
    let mut base = toml::Table::try_from(&defaults).map_err(runtime)?;
    if let Some(toml::Value::Table(env)) = user.get("env") {
        // A user-supplied domain invalidates the domain-derived default.
        if env.contains_key("domain") && !env.contains_key("q_reward") {
            if let Some(toml::Value::Table(b)) = base.get_mut("env") {
                b.insert("q_reward".into(), toml::Value::Array(Vec::new()));
            }
        }
    }
    merge(&mut base, user);
    let mut config: RunConfig = toml::Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
    config.complete()?;
    Ok(config)
}

fn create_file(path: &Path, force: bool) -> Result<BufWriter<fs::File>, CliError> {
    if path.exists() && !force {
        return Err(CliError::Validation(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str, force: bool) -> Result<(), CliError> {
    let mut w = create_file(path, force)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn write_with<F>(path: &Path, force: bool, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let mut w = create_file(path, force)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub k_available_step: Option<u64>,
    pub final_shift: Vec<f64>,
    pub shift_clipped: bool,
    pub episodes: usize,
}

/// Trains a policy and writes the run directory.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let config = resolve_config(&args.config, args.out.as_deref())?;
    let spec = config.env_spec()?;
    let dir = PathBuf::from(&config.io.out_dir);
    let artifacts = [RESOLVED_CONFIG, POLICY_FILE, GAIN_FILE, TRAIN_LOG_FILE, SYSID_REPORT_FILE, TRAIN_META_FILE];
    if !args.force {
        if let Some(existing) = artifacts.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Validation(format!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    ensure_dir(&dir)?;
    write_text(&dir.join(RESOLVED_CONFIG), &config.to_toml()?, true)?;

    let checkpoint_dir = dir.join("checkpoints");
    let mut checkpoint_error = None;
    let outcome = agent::train_with_checkpoints(&spec, &config.train_config(), config.io.checkpoint_every, |step, actor| {
        if checkpoint_error.is_some() {
            return;
        }
        let path = checkpoint_dir.join(format!("policy_{step:09}.json"));
        let written = ensure_dir(&checkpoint_dir).and_then(|_| write_text(&path, &actor.to_json(), true));
        checkpoint_error = written.err();
    });
    let outcome = match (outcome, checkpoint_error) {
        (Ok(o), None) => o,
        (Err(e), _) => {
            let _ = write_text(&dir.join(ERROR_FILE), &format!("{e}\n"), true);
            return Err(runtime(e));
        }
        (Ok(_), Some(e)) => {
            let _ = write_text(&dir.join(ERROR_FILE), &format!("{e}\n"), true);
            return Err(e);
        }
    };

    write_text(&dir.join(POLICY_FILE), &outcome.policy.to_json(), true)?;
    if let (Some(model), Some(gain)) = (&outcome.model, &outcome.gain) {
        let sidecar = serde_json::to_string_pretty(&GainSidecar::new(model, gain)).map_err(runtime)?;
        write_text(&dir.join(GAIN_FILE), &sidecar, true)?;
    }
    write_with(&dir.join(TRAIN_LOG_FILE), true, |w| write_train_log(w, &outcome.log))?;
    write_with(&dir.join(SYSID_REPORT_FILE), true, |w| write_sysid_report(w, &outcome.sysid_report))?;
    let meta = TrainMeta {
        k_available_step: outcome.k_available_step,
        final_shift: outcome.final_shift.clone(),
        shift_clipped: outcome.shift_clipped,
        episodes: outcome.log.len(),
    };
    write_text(&dir.join(TRAIN_META_FILE), &serde_json::to_string_pretty(&meta).map_err(runtime)?, true)?;
    Ok(dir)
}

/// Loads a policy checkpoint and checks it against the env's dimensions.
pub fn load_policy(path: &Path, spec: &EnvSpec) -> Result<GaussianPolicy, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let policy =
        GaussianPolicy::from_json(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let expected = (spec.state_dim(), spec.action_dim());
    let actual = (policy.state_dim(), policy.action_dim());
    if expected != actual {
        return Err(CliError::Validation(format!(
            "{}: env `{}` expects state dim {} and action dim {}, policy has state dim {} and action dim {}",
            path.display(),
            spec.name,
            expected.0,
            expected.1,
            actual.0,
            actual.1
        )));
    }
    Ok(policy)
}

/// A policy argument may name a run directory; its `config.resolved`
/// then serves as the config file unless one was given.
fn policy_source(policy: &Path, config: &ConfigArgs) -> (PathBuf, ConfigArgs) {
    let mut config = config.clone();
    if policy.is_dir() {
        if config.config.is_none() && policy.join(RESOLVED_CONFIG).exists() {
            config.config = Some(policy.join(RESOLVED_CONFIG));
        }
        (policy.join(POLICY_FILE), config)
    } else {
        (policy.to_path_buf(), config)
    }
}

fn parse_state(raw: &str, n: usize) -> Result<Vec<f64>, CliError> {
    let x: Vec<f64> = raw
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("--start `{raw}`: {e}")))?;
    if x.len() != n {
        return Err(CliError::Validation(format!("--start has {} entries, env state dim is {n}", x.len())));
    }
    Ok(x)
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    /// Policy JSON or run directory.
    #[arg(long)]
    pub policy: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_starts: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Single comma-separated start state instead of sampled starts.
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long)]
    pub force: bool,
}

/// Writes one trajectory CSV per start plus the aggregate cost curve.
pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf, CliError> {
    let (policy_path, config_args) = policy_source(&args.policy, &args.config);
    let config = resolve_config(&config_args, None)?;
    let spec = config.env_spec()?;
    let policy = load_policy(&policy_path, &spec)?;
    let (q, r) = config.eval_costs(&spec)?;
    let horizon = args.horizon.unwrap_or(config.eval.horizon);
    let starts = match &args.start {
        Some(raw) => vec![parse_state(raw, spec.state_dim())?],
        None => sample_starts(&spec, args.n_starts.unwrap_or(config.eval.n_starts), config.seed),
    };
    if starts.is_empty() {
        return Err(CliError::Validation("n_starts must be positive".into()));
    }
    ensure_dir(&args.out)?;
    for (i, x0) in starts.iter().enumerate() {
        let traj = eval::rollout(&policy, &spec, x0, horizon, &q, &r).map_err(|e| match e {
            eval::EvalError::StartOutsideDomain(_) | eval::EvalError::DimensionMismatch { .. } => {
                CliError::Validation(e.to_string())
            }
            other => runtime(other),
        })?;
        write_with(&args.out.join(format!("traj_{i:03}.csv")), args.force, |w| traj.write_csv(w))?;
    }
    let name = policy_name(&args.policy);
    let controllers: Vec<(String, &dyn Controller)> = vec![(name, &policy)];
    let table = compare_costs(&controllers, &spec, &starts, horizon, &q, &r).map_err(runtime)?;
    write_with(&args.out.join(COST_CURVE_FILE), args.force, |w| table.write_curves(w))?;
    write_with(&args.out.join(SUMMARY_FILE), args.force, |w| table.write_summary(w))?;
    Ok(args.out.clone())
}

#[derive(Debug, Clone, Default, Args)]
pub struct VerifyArgs {
    /// Policy JSON or run directory.
    #[arg(long)]
    pub policy: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Linearization, Schur test, Lyapunov matrix and sampled ROA, written as
/// `roa_report.json`.
pub fn cmd_verify(args: &VerifyArgs) -> Result<eval::VerifyReport, CliError> {
    let (policy_path, config_args) = policy_source(&args.policy, &args.config);
    let config = resolve_config(&config_args, None)?;
    let spec = config.env_spec()?;
    let policy = load_policy(&policy_path, &spec)?;
    let q_v = config.verify_q(&spec)?;
    let report = eval::verify(&spec, &policy, &q_v, &config.verify.roa_options(), config.seed).map_err(runtime)?;
    ensure_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    write_text(&args.out.join(ROA_REPORT_FILE), &json, args.force)?;
    Ok(report)
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompareArgs {
    /// Run directories to compare.
    #[arg(long = "run", value_name = "DIR")]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for the shared starts; defaults to the first run's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_starts: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

fn policy_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Rolls several runs' policies out from shared starts and writes cost
/// curves plus one summary row per run.
pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<eval::PolicySummary>, CliError> {
    if args.runs.is_empty() {
        return Err(CliError::Validation("compare needs at least one --run directory".into()));
    }
    let mut loaded = Vec::new();
    for dir in &args.runs {
        let config = resolve_config(
            &ConfigArgs {
                config: Some(dir.join(RESOLVED_CONFIG)),
                ..ConfigArgs::default()
            },
            None,
        )?;
        let spec = config.env_spec()?;
        let policy = load_policy(&dir.join(POLICY_FILE), &spec)?;
        loaded.push((policy_name(dir), config, spec, policy));
    }
    let (_, first_config, first_spec, _) = &loaded[0];
    if let Some((name, ..)) = loaded.iter().find(|(_, _, spec, _)| spec != first_spec) {
        return Err(CliError::Validation(format!("run `{name}` uses a different env than `{}`", loaded[0].0)));
    }
    let (q, r) = first_config.eval_costs(first_spec)?;
    let seed = args.seed.unwrap_or(first_config.seed);
    let horizon = args.horizon.unwrap_or(first_config.eval.horizon);
    let starts = sample_starts(first_spec, args.n_starts.unwrap_or(first_config.eval.n_starts), seed);
    let controllers: Vec<(String, &dyn Controller)> =
        loaded.iter().map(|(name, _, _, p)| (name.clone(), p as &dyn Controller)).collect();
    let table = compare_costs(&controllers, first_spec, &starts, horizon, &q, &r).map_err(runtime)?;
    ensure_dir(&args.out)?;
    write_with(&args.out.join(COST_CURVE_FILE), args.force, |w| table.write_curves(w))?;
    write_with(&args.out.join(SUMMARY_FILE), args.force, |w| table.write_summary(w))?;
    Ok(table.curves.iter().map(|c| c.summary()).collect())
}

#[derive(Debug, Clone, Default, Args)]
pub struct SysIdTestArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows per phase; defaults to `train.threshold_a`.
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

/// Identifies the configured env from simulated near-origin data and
/// compares against its finite-difference linearization.
pub fn cmd_sysid_test(args: &SysIdTestArgs) -> Result<Vec<crate::sysid::SysIdReportRow>, CliError> {
    let config = resolve_config(&args.config, None)?;
    let spec = config.env_spec()?;
    let train = config.train_config();
    let rows = args.rows.unwrap_or(train.threshold_a);
    let mut rng = stream(config.seed, Stream::SysId);
    let fixture = identify_by_simulation(&spec, train.eta, rows, &train.lqr_r_matrix(spec.action_dim()), &mut rng)
        .map_err(runtime)?;
    ensure_dir(&args.out)?;
    write_with(&args.out.join(SYSID_REPORT_FILE), args.force, |w| write_sysid_report(w, &fixture.report))?;
    Ok(fixture.report)
}

#[derive(Debug, Parser)]
#[command(name = "sacstab", version, about = "Train and verify stabilizing SAC controllers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Train(TrainArgs),
    Eval(EvalArgs),
    Verify(VerifyArgs),
    Compare(CompareArgs),
    #[command(name = "sysid-test")]
    SysIdTest(SysIdTestArgs),
}

/// Runs one command and returns a short human-readable report.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(|d| format!("run written to {}", d.display())),
        Command::Eval(a) => cmd_eval(a).map(|d| format!("evaluation written to {}", d.display())),
        Command::Verify(a) => cmd_verify(a).map(|r| match &r.roa {
            Some(roa) => format!(
                "schur_stable=true level={} certified_by_sampling={}",
                roa.level, roa.certified_by_sampling
            ),
            None => "schur_stable=false".to_string(),
        }),
        Command::Compare(a) => cmd_compare(a).map(|rows| {
            rows.iter().map(eval::summary_row_display).collect::<Vec<_>>().join("\n")
        }),
        Command::SysIdTest(a) => cmd_sysid_test(a).map(|rows| {
            rows.iter()
                .map(|r| {
                    format!(
                        "{}: err_A={:?} err_B={:?} schur_stable={:?}",
                        r.phase.label(),
                        r.fro_err_a,
                        r.fro_err_b,
                        r.schur_stable
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        }),
    }
}
