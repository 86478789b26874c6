//! Command-line front end. Every subcommand writes a JSON run manifest with
//! the resolved settings, seeds, and SHA-256 digests of inputs and outputs.
//!
//! Settings resolve as flag, then `--config` file (`key=value` lines), then
//! built-in default. Errors print one line, `error[<kind>] <message>`, and
//! exit with 2 (config), 3 (data), 4 (backend), or 5 (divergence/validation).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::agent::{run_episode, run_plan_mode, AgentConfig, AgentError, Trace};
use crate::attrtool::{self, fine_tune, load_attr_checkpoint, AttrToolError, FineTuneConfig, FineTuneMode, ParamReportRow, RetrievalTool};
use crate::checkpoint::{file_digest, Checkpoint, CheckpointError};
use crate::corpus::{self, CorpusError, DatasetSplit, IngestOptions};
use crate::eval::{self, AblationMode, AblationSystem, AgentSystem, AttrToolSystem, BackboneSystem, EvalError, EvalReport, Protocol, Recommender};
use crate::llm::{parse_key_values, BackendConfig, BackendKind, ChatBackend, LlmError, Recorder};
use crate::seqrec::{train_backbone, BackboneParams, SeqRecError, TrainConfig};
use crate::tools::{Domain, Templates, ToolError, ToolRegistry};

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, kind: "config", message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 3, kind: "data", message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self { code: 4, kind: "backend", message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 5, kind: "validation", message: message.into() }
    }

    /// Single-line form printed on stderr.
    pub fn line(&self) -> String {
        let msg: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}] {}", self.kind, msg.join(" "))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<SeqRecError> for CliError {
    fn from(e: SeqRecError) -> Self {
        match e {
            SeqRecError::Divergence { .. } => Self::validation(e.to_string()),
            SeqRecError::Config(_) | SeqRecError::ZeroK => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<AttrToolError> for CliError {
    fn from(e: AttrToolError) -> Self {
        match e {
            AttrToolError::Divergence { .. } => Self::validation(e.to_string()),
            AttrToolError::UnknownAttribute { .. } | AttrToolError::BadK { .. } => Self::config(e.to_string()),
            AttrToolError::SeqRec(s) => s.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::ReplayDivergence { .. } => Self::validation(e.to_string()),
            LlmError::Config(_) => Self::config(e.to_string()),
            LlmError::Io { .. } | LlmError::Format { .. } => Self::data(e.to_string()),
            _ => Self::backend(e.to_string()),
        }
    }
}

impl From<ToolError> for CliError {
    fn from(e: ToolError) -> Self {
        match e {
            ToolError::AttrTool(a) => a.into(),
            ToolError::Llm(l) => l.into(),
            ToolError::Io { .. } => Self::data(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Llm(l) => l.into(),
            AgentError::Tool(t) => t.into(),
            AgentError::NoTools => Self::config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::SeqRec(s) => s.into(),
            EvalError::AttrTool(a) => a.into(),
            EvalError::Tool(t) => t.into(),
            EvalError::Agent(a) => a.into(),
            EvalError::MissingArtifact(_) | EvalError::NoUsers => Self::data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "toolrec", version, about = "Surrogate-user recommendation with attribute-oriented tools")]
pub struct Cli {
    /// key=value settings file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, re-index, and split raw interaction and attribute files.
    Ingest(IngestArgs),
    /// Train the sequential backbone.
    Pretrain(PretrainArgs),
    /// Fine-tune one attribute retrieval tool on a frozen backbone.
    FinetuneAttr(FinetuneArgs),
    /// Run the agent for selected users and write traces.
    RunAgent(RunAgentArgs),
    /// Evaluate a system with the leave-one-out protocol.
    Eval(EvalArgs),
    /// Evaluate the w_single, w_multi, or w_plan variant.
    Ablate(AblateArgs),
    /// Histogram of termination rounds from trace files.
    ReportRounds(ReportRoundsArgs),
    /// Trainable parameters and FLOPs per checkpoint.
    ReportParams(ReportParamsArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Interaction file (user, item, rating, timestamp).
    #[arg(long)]
    pub interactions: PathBuf,
    /// Item file (id, name, attribute=value|value ...).
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub k_core: Option<usize>,
    /// Numeric attributes to replace by decile tokens.
    #[arg(long)]
    pub bucketize: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Split directory written by `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub attribute: String,
    /// Defaults to `<dataset>.<attribute>.attr` next to the backbone.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `frozen` (default) or `full`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Default)]
pub struct BackendFlags {
    /// remote, scripted, or replay.
    #[arg(long)]
    pub backend: Option<String>,
    /// key=value backend settings (endpoint, model, temperature, ...).
    #[arg(long)]
    pub backend_config: Option<PathBuf>,
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Record every completion to this transcript file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Prompt template overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunAgentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    /// Directory of `*.attr` checkpoints.
    #[arg(long)]
    pub tools: PathBuf,
    #[command(flatten)]
    pub backend: BackendFlags,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub trace_dir: PathBuf,
    /// Internal user ids to run; repeatable.
    #[arg(long = "user")]
    pub user: Vec<usize>,
    /// Number of users to sample when no `--user` is given.
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generate the whole plan in one completion.
    #[arg(long)]
    pub plan: bool,
}

#[derive(Debug, Args, Default)]
pub struct ProtocolFlags {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Evaluate users in parallel.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub max_rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// backbone, agent, attr:<attribute>, w_single, w_multi, or w_plan.
    #[arg(long)]
    pub system: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub tools: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendFlags,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
    #[arg(long)]
    pub rank_attribute: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// w_single, w_multi, or w_plan.
    #[arg(long)]
    pub mode: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub tools: PathBuf,
    #[command(flatten)]
    pub backend: BackendFlags,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
    #[arg(long)]
    pub rank_attribute: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportRoundsArgs {
    #[arg(long)]
    pub trace_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportParamsArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    /// Attribute checkpoints (frozen or full).
    #[arg(long, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flag > config file > default, remembering every resolved value.
struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, Value>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                parse_key_values(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => BTreeMap::new(),
        };
        Ok(Self { file, resolved: BTreeMap::new() })
    }

    fn pick<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(s) => s.parse().map_err(|_| CliError::config(format!("invalid value for `{key}`: `{s}`")))?,
                None => default,
            },
        };
        self.note(key, v.to_string());
        Ok(v)
    }

    fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.resolved.insert(key.to_string(), value.into());
    }
}

struct Manifest {
    command: &'static str,
    artifacts: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Self { command, artifacts: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    fn input(&mut self, p: &Path) -> Result<(), CliError> {
        digest_into(&mut self.artifacts, p)
    }

    fn output(&mut self, p: &Path) -> Result<(), CliError> {
        digest_into(&mut self.outputs, p)
    }

    fn write(&self, path: &Path, settings: &Settings) -> Result<(), CliError> {
        let v = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "settings": settings.resolved,
            "inputs": self.artifacts,
            "outputs": self.outputs,
        });
        write_file(path, &(serde_json::to_string_pretty(&v).expect("manifest serializes") + "\n"))
    }
}

/// Digests a file, or every file under a directory.
fn digest_into(map: &mut BTreeMap<String, String>, p: &Path) -> Result<(), CliError> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p).map_err(|e| io_err(p, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for e in entries {
            if e.is_file() && e.file_name().is_some_and(|n| n != "manifest.json") {
                digest_into(map, &e)?;
            }
        }
        return Ok(());
    }
    let d = file_digest(p).map_err(|e| io_err(p, e))?;
    map.insert(p.display().to_string(), d);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_config(s: &mut Settings, f: &TrainFlags, dim: Option<usize>, max_len: Option<usize>) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        dim: s.pick("dim", dim, d.dim)?,
        layers: s.pick("layers", f.layers, d.layers)?,
        heads: s.pick("heads", None, d.heads)?,
        max_len: s.pick("max_len", max_len, d.max_len)?,
        dropout: s.pick("dropout", f.dropout, d.dropout)?,
        lr: s.pick("lr", f.lr, d.lr)?,
        batch_size: s.pick("batch_size", f.batch_size, d.batch_size)?,
        epochs: s.pick("epochs", f.epochs, d.epochs)?,
        patience: s.pick("patience", f.patience, d.patience)?,
        seed: s.pick("seed", f.seed, d.seed)?,
    })
}

fn load_backbone(path: &Path) -> Result<BackboneParams, CliError> {
    let c = Checkpoint::read(path).map_err(|e| CliError::data(format!("backbone checkpoint {}: {e}", path.display())))?;
    Ok(BackboneParams::from_checkpoint(&c)?)
}

fn load_data(path: &Path) -> Result<DatasetSplit, CliError> {
    Ok(corpus::load_split(path)?)
}

fn build_backend(s: &mut Settings, f: &BackendFlags) -> Result<Box<dyn ChatBackend>, CliError> {
    let mut cfg = BackendConfig::default();
    cfg.apply(&s.file)?;
    if let Some(p) = &f.backend_config {
        cfg = BackendConfig::from_file(p)?;
    }
    if let Some(k) = &f.backend {
        cfg.kind = BackendKind::from_str(k)?;
    }
    if let Some(p) = &f.script {
        cfg.script = Some(p.clone());
    }
    if let Some(p) = &f.transcript {
        cfg.transcript = Some(p.clone());
    }
    s.note("backend", cfg.kind.to_string());
    match cfg.kind {
        BackendKind::Remote => {
            s.note("endpoint", cfg.endpoint.clone());
            s.note("model", cfg.model.clone());
            s.note("temperature", cfg.temperature.map_or("default".to_string(), |t| t.to_string()));
            s.note("retries", cfg.retries);
            s.note("timeout_secs", cfg.timeout_secs);
        }
        BackendKind::Scripted => s.note("script", cfg.script.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
        BackendKind::Replay => s.note("transcript", cfg.transcript.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
    }
    Ok(cfg.build()?)
}

fn build_registry(split: &DatasetSplit, backbone: BackboneParams, tools: Option<&Path>, templates: Option<&Path>) -> Result<ToolRegistry, CliError> {
    let domain = Domain::for_dataset(&split.name);
    let templates = match templates {
        Some(dir) => Templates::load_dir(dir, domain).map_err(|e| io_err(dir, e))?,
        None => Templates::with_domain(domain),
    };
    let catalog = Arc::new(split.catalog.clone());
    let backbone = Arc::new(backbone);
    let reg = match tools {
        Some(dir) => ToolRegistry::load_dir(catalog, backbone, dir, templates)?,
        None => ToolRegistry::new(catalog, backbone, Vec::new(), templates)?,
    };
    Ok(reg)
}

fn cmd_ingest(a: &IngestArgs, s: &mut Settings) -> Result<(), CliError> {
    let name = s.pick("name", a.name.clone(), a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()))?;
    let k_core = s.pick("k_core", a.k_core, 0)?;
    s.note("bucketize", a.bucketize.join(","));
    let opts = IngestOptions { dataset_name: name, k_core, bucketize: a.bucketize.clone() };
    let split = corpus::ingest(&a.interactions, &a.items, &opts)?;
    corpus::save_split(&split, &a.out)?;
    let mut m = Manifest::new("ingest");
    m.input(&a.interactions)?;
    m.input(&a.items)?;
    m.output(&a.out)?;
    m.write(&a.out.join("manifest.json"), s)?;
    let st = &split.stats;
    println!("users={} items={} interactions={} sparsity={:.2}%", st.num_users, st.num_items, st.num_interactions, st.sparsity_percent);
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs, s: &mut Settings) -> Result<(), CliError> {
    let split = load_data(&a.data)?;
    let cfg = train_config(s, &a.train, a.dim, a.max_len)?;
    let (params, log) = train_backbone(&split, &cfg)?;
    params.to_checkpoint(&split.name).write(&a.out)?;
    let log_path = with_suffix(&a.out, ".log");
    write_file(&log_path, &log.to_text())?;
    let mut m = Manifest::new("pretrain");
    m.input(&a.data)?;
    m.output(&a.out)?;
    m.output(&log_path)?;
    m.write(&with_suffix(&a.out, ".manifest.json"), s)?;
    println!("best_epoch={} params={}", log.best_epoch.unwrap_or(0), crate::nn::ParamTensors::num_params(&params));
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs, s: &mut Settings) -> Result<(), CliError> {
    let split = load_data(&a.data)?;
    let backbone = load_backbone(&a.backbone)?;
    let before = file_digest(&a.backbone).map_err(|e| io_err(&a.backbone, e))?;
    let d = FineTuneConfig::default();
    let mode = match s.pick("mode", a.mode.clone(), "frozen".to_string())?.as_str() {
        "frozen" => FineTuneMode::Frozen,
        "full" => FineTuneMode::Full,
        other => return Err(CliError::config(format!("unknown fine-tune mode `{other}`"))),
    };
    let f = &a.train;
    let cfg = FineTuneConfig {
        layers: s.pick("attr_layers", f.layers, d.layers)?,
        dropout: s.pick("dropout", f.dropout, d.dropout)?,
        lr: s.pick("lr", f.lr, d.lr)?,
        batch_size: s.pick("batch_size", f.batch_size, d.batch_size)?,
        epochs: s.pick("epochs", f.epochs, d.epochs)?,
        patience: s.pick("patience", f.patience, d.patience)?,
        seed: s.pick("seed", f.seed, d.seed)?,
        mode,
        word_vectors: a.word_vectors.clone(),
    };
    let attribute = s.pick("attribute", Some(a.attribute.clone()), String::new())?;
    let tuned = fine_tune(&backbone, &split, &attribute, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let dir = a.backbone.parent().unwrap_or(Path::new("."));
        dir.join(format!("{}.{}.attr", split.name, tuned.encoder.attribute))
    });
    tuned.to_checkpoint(&split.name, &backbone).write(&out)?;
    let log_path = with_suffix(&out, ".log");
    write_file(&log_path, &tuned.log.to_text())?;
    let after = file_digest(&a.backbone).map_err(|e| io_err(&a.backbone, e))?;
    if before != after {
        return Err(CliError::validation("backbone checkpoint changed during fine-tuning"));
    }
    let mut m = Manifest::new("finetune-attr");
    m.input(&a.data)?;
    m.input(&a.backbone)?;
    if let Some(w) = &a.word_vectors {
        m.input(w)?;
    }
    m.output(&out)?;
    m.output(&log_path)?;
    m.write(&with_suffix(&out, ".manifest.json"), s)?;
    println!("attribute={} trainable_params={} out={}", tuned.encoder.attribute, tuned.trainable_params(&backbone), out.display());
    Ok(())
}

fn write_trace(dir: &Path, user: usize, trace: &Trace, memory_dump: Option<&str>) -> Result<(), CliError> {
    write_file(&dir.join(format!("user_{user}.jsonl")), &trace.to_jsonl())?;
    if let Some(m) = memory_dump {
        write_file(&dir.join(format!("memory_{user}.tsv")), m)?;
    }
    Ok(())
}

fn cmd_run_agent(a: &RunAgentArgs, s: &mut Settings) -> Result<(), CliError> {
    let split = load_data(&a.data)?;
    let backbone = load_backbone(&a.backbone)?;
    let registry = build_registry(&split, backbone, Some(&a.tools), a.backend.templates.as_deref())?;
    let backend = Recorder::new(build_backend(s, &a.backend)?);
    let cfg = AgentConfig {
        max_rounds: s.pick("max_rounds", a.max_rounds, 8)?,
        n: s.pick("n", a.n, 10)?,
        ..AgentConfig::default()
    };
    let users: Vec<usize> = if a.user.is_empty() {
        let count = s.pick("users", a.users, 1)?;
        let seed = s.pick("seed", a.seed, 42)?;
        eval::sample_users(split.histories.len(), count, seed, 1)
    } else {
        a.user.clone()
    };
    s.note("user_ids", users.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(","));
    s.note("plan", a.plan);
    let mut finals = String::from("user\ttarget\thit\ttermination\trounds\tfinal\n");
    let mut failures = 0;
    for &u in &users {
        let h = split.history(u).ok_or_else(|| CliError::config(format!("no user with id {u}")))?;
        let r = if a.plan { run_plan_mode(h, &registry, &backend, &cfg)? } else { run_episode(h, &registry, &backend, &cfg)? };
        let sum = r.trace.summary.as_ref().expect("episodes end with a summary");
        for &i in &r.final_ids() {
            if i >= split.catalog.len() || h.test_input().contains(&i) {
                return Err(CliError::validation(format!("user {u}: final list holds invalid item {i}")));
            }
        }
        if r.termination == crate::agent::Termination::BackendFailure {
            failures += 1;
        }
        let ids: Vec<String> = r.final_ids().iter().map(|i| i.to_string()).collect();
        finals.push_str(&format!("{u}\t{}\t{}\t{}\t{}\t{}\n", h.target, sum.hit, r.termination, r.rounds, ids.join(",")));
        write_trace(&a.trace_dir, u, &r.trace, Some(&r.memory_dump))?;
        println!("user={u} termination={} rounds={} hit={}", r.termination, r.rounds, sum.hit);
    }
    let finals_path = a.trace_dir.join("final_lists.tsv");
    write_file(&finals_path, &finals)?;
    let transcript = a.backend.record.clone().unwrap_or_else(|| a.trace_dir.join("transcript.txt"));
    backend.save(&transcript)?;
    let mut m = Manifest::new("run-agent");
    m.input(&a.data)?;
    m.input(&a.backbone)?;
    m.input(&a.tools)?;
    for p in [&a.backend.script, &a.backend.transcript, &a.backend.backend_config].into_iter().flatten() {
        m.input(p)?;
    }
    m.output(&a.trace_dir)?;
    m.write(&a.trace_dir.join("manifest.json"), s)?;
    if failures == users.len() && !users.is_empty() {
        return Err(CliError::backend("backend unavailable for every user"));
    }
    Ok(())
}

fn protocol(s: &mut Settings, p: &ProtocolFlags) -> Result<Protocol, CliError> {
    let d = Protocol::default();
    let parallel = p.parallel || s.file.get("parallel").is_some_and(|v| v == "true");
    s.note("parallel", parallel);
    Ok(Protocol {
        n: s.pick("n", p.n, d.n)?,
        users_per_trial: s.pick("users", p.users, d.users_per_trial)?,
        trials: s.pick("trials", p.trials, d.trials)?,
        base_seed: s.pick("seed", p.seed, d.base_seed)?,
        parallel,
    })
}

fn write_report(out: &Path, report: &EvalReport, m: &mut Manifest, s: &Settings) -> Result<(), CliError> {
    write_file(&out.join("report.txt"), &report.to_text())?;
    write_file(&out.join("report.tsv"), &report.to_tsv())?;
    write_file(&out.join("users.tsv"), &report.users_text())?;
    for (i, t) in report.traces.iter().enumerate() {
        let user = t.summary.as_ref().map_or(i, |x| x.user);
        let trial = report.users.get(i).map_or(0, |u| u.trial);
        write_file(&out.join("traces").join(format!("trial{trial}_user_{user}.jsonl")), &t.to_jsonl())?;
    }
    m.output(&out.join("report.tsv"))?;
    m.output(&out.join("users.tsv"))?;
    m.write(&out.join("manifest.json"), s)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, s: &mut Settings) -> Result<(), CliError> {
    let split = load_data(&a.data)?;
    let backbone = load_backbone(&a.backbone)?;
    let proto = protocol(s, &a.protocol)?;
    let max_rounds = s.pick("max_rounds", a.protocol.max_rounds, 8)?;
    s.note("system", a.system.clone());
    let mut m = Manifest::new("eval");
    m.input(&a.data)?;
    m.input(&a.backbone)?;
    if let Some(t) = &a.tools {
        m.input(t)?;
    }
    let config = serde_json::to_string(&s.resolved).unwrap_or_default();
    let report = if a.system == "backbone" {
        eval::run_experiment(&split, &BackboneSystem { params: &backbone }, &proto, &config)?
    } else if let Some(attr) = a.system.strip_prefix("attr:") {
        let dir = a.tools.as_ref().ok_or_else(|| CliError::config("--tools is required for attribute systems"))?;
        let reg = build_registry(&split, backbone.clone(), Some(dir), None)?;
        let tool: &RetrievalTool = reg.find_retrieval(attr).ok_or_else(|| CliError::data(format!("missing artifact: retrieval tool `{attr}` in {}", dir.display())))?;
        eval::run_experiment(&split, &AttrToolSystem { tool, split: &split }, &proto, &config)?
    } else {
        let dir = a.tools.as_ref().ok_or_else(|| CliError::config("--tools is required for agent systems"))?;
        let reg = build_registry(&split, backbone, Some(dir), a.backend.templates.as_deref())?;
        let backend = Recorder::new(build_backend(s, &a.backend)?);
        let config = serde_json::to_string(&s.resolved).unwrap_or_default();
        let agent_cfg = AgentConfig { max_rounds, ..AgentConfig::default() };
        let system: Box<dyn Recommender + '_> = match a.system.as_str() {
            "agent" => Box::new(AgentSystem { registry: &reg, backend: &backend, config: agent_cfg, plan_mode: false }),
            other => {
                let mode: AblationMode = other.parse().map_err(|_| CliError::config(format!("unknown system `{other}`")))?;
                Box::new(AblationSystem { mode, registry: &reg, backend: &backend, rank_attribute: a.rank_attribute.clone(), config: agent_cfg })
            }
        };
        let r = eval::run_experiment(&split, system.as_ref(), &proto, &config)?;
        let tp = a.backend.record.clone().unwrap_or_else(|| a.out.join("transcript.txt"));
        backend.save(&tp)?;
        r
    };
    write_report(&a.out, &report, &mut m, s)
}

fn cmd_ablate(a: &AblateArgs, s: &mut Settings) -> Result<(), CliError> {
    let mode: AblationMode = a.mode.parse().map_err(CliError::config)?;
    let e = EvalArgs {
        system: mode.as_str().into(),
        data: a.data.clone(),
        backbone: a.backbone.clone(),
        tools: Some(a.tools.clone()),
        backend: BackendFlags {
            backend: a.backend.backend.clone(),
            backend_config: a.backend.backend_config.clone(),
            script: a.backend.script.clone(),
            transcript: a.backend.transcript.clone(),
            record: a.backend.record.clone(),
            templates: a.backend.templates.clone(),
        },
        protocol: ProtocolFlags {
            users: a.protocol.users,
            trials: a.protocol.trials,
            seed: a.protocol.seed,
            n: a.protocol.n,
            parallel: a.protocol.parallel,
            max_rounds: a.protocol.max_rounds,
        },
        rank_attribute: a.rank_attribute.clone(),
        out: a.out.clone(),
    };
    cmd_eval(&e, s)
}

/// Episode summaries from every `*.jsonl` file under `dir`, recursively.
pub fn read_summaries(dir: &Path) -> Result<Vec<crate::agent::EpisodeSummary>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    let mut files = Vec::new();
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
            let p = e.map_err(|e| io_err(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "jsonl") {
                files.push(p);
            }
        }
    }
    files.sort();
    for p in files {
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let t = Trace::from_jsonl(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        if let Some(sm) = t.summary {
            out.push(sm);
        }
    }
    Ok(out)
}

fn cmd_report_rounds(a: &ReportRoundsArgs, s: &mut Settings) -> Result<(), CliError> {
    let summaries = read_summaries(&a.trace_dir)?;
    if summaries.is_empty() {
        return Err(CliError::data(format!("no traces under {}", a.trace_dir.display())));
    }
    let tsv = eval::rounds_report(&summaries).to_tsv();
    print!("{tsv}");
    if let Some(out) = &a.out {
        write_file(out, &tsv)?;
        let mut m = Manifest::new("report-rounds");
        m.input(&a.trace_dir)?;
        m.output(out)?;
        m.write(&with_suffix(out, ".manifest.json"), s)?;
    }
    Ok(())
}

fn cmd_report_params(a: &ReportParamsArgs, s: &mut Settings) -> Result<(), CliError> {
    let backbone = load_backbone(&a.backbone)?;
    let mut rows = vec![ParamReportRow {
        model: "backbone".into(),
        trainable_params: crate::nn::ParamTensors::num_params(&backbone),
        flops: attrtool::forward_flops(&backbone, None),
    }];
    for p in &a.checkpoints {
        let c = Checkpoint::read(p)?;
        let (enc, tuned) = load_attr_checkpoint(&c)?;
        let full = tuned.is_some();
        rows.push(ParamReportRow {
            model: format!("{}+{}", if full { "full" } else { "frozen" }, enc.attribute),
            trainable_params: attrtool::trainable_params(&backbone, &enc, full),
            flops: attrtool::forward_flops(&backbone, Some(&enc)),
        });
    }
    let tsv = attrtool::render_param_report(&rows);
    print!("{tsv}");
    if let Some(out) = &a.out {
        write_file(out, &tsv)?;
        let mut m = Manifest::new("report-params");
        m.input(&a.backbone)?;
        for p in &a.checkpoints {
            m.input(p)?;
        }
        m.output(out)?;
        m.write(&with_suffix(out, ".manifest.json"), s)?;
    }
    Ok(())
}

struct StderrLogger;

static LOGGER: StderrLogger = StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata<'_>) -> bool {
        m.level() <= log::max_level()
    }

    fn log(&self, r: &log::Record<'_>) {
        if self.enabled(r.metadata()) {
            eprintln!("[{}] {}", r.level(), r.args());
        }
    }

    fn flush(&self) {}
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(level);
    }
    let mut s = Settings::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a, &mut s),
        Command::Pretrain(a) => cmd_pretrain(a, &mut s),
        Command::FinetuneAttr(a) => cmd_finetune(a, &mut s),
        Command::RunAgent(a) => cmd_run_agent(a, &mut s),
        Command::Eval(a) => cmd_eval(a, &mut s),
        Command::Ablate(a) => cmd_ablate(a, &mut s),
        Command::ReportRounds(a) => cmd_report_rounds(a, &mut s),
        Command::ReportParams(a) => cmd_report_params(a, &mut s),
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code
        }
    }
}
