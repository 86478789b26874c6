//! Leave-one-out metrics and the experiment protocol.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{run_episode, run_plan_mode, AgentConfig, AgentError, EpisodeSummary, Termination, Trace};
use crate::attrtool::{AttrToolError, RetrievalTool};
use crate::corpus::{DatasetSplit, UserHistory};
use crate::llm::ChatBackend;
use crate::seqrec::{rank_scores, top_k, BackboneParams, SeqRecError};
use crate::tools::{CandidateEntry, CandidateList, ToolError, ToolMark, ToolRegistry, ToolType};

/// 1/log2(1 + rank) when `target` is at 1-based `rank <= n`, else 0.
pub fn ndcg_at_n(ranked: &[usize], target: usize, n: usize) -> f64 {
    match ranked.iter().take(n).position(|&i| i == target) {
        Some(pos) => 1.0 / ((pos + 2) as f64).log2(),
        None => 0.0,
    }
}

pub fn recall_at_n(ranked: &[usize], target: usize, n: usize) -> f64 {
    if ranked.iter().take(n).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// Sample mean and (n−1)-denominator standard deviation; std is 0 for n < 2.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("no users to evaluate")]
    NoUsers,
    #[error(transparent)]
    SeqRec(#[from] SeqRecError),
    #[error(transparent)]
    AttrTool(#[from] AttrToolError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub n: usize,
    pub users_per_trial: usize,
    pub trials: usize,
    pub base_seed: u64,
    /// Fan out per-user evaluation; keep off for scripted backends, whose
    /// replies are consumed in call order.
    pub parallel: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { n: 10, users_per_trial: 200, trials: 3, base_seed: 42, parallel: false }
    }
}

/// Users for trial `t` (1-based), sampled without replacement under seed
/// `base_seed + t`. Every system sees the same users for the same seed.
pub fn sample_users(num_users: usize, count: usize, base_seed: u64, trial: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(trial as u64));
    rand::seq::index::sample(&mut rng, num_users, count.min(num_users)).into_vec()
}

/// What a system returns for one user.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserOutcome {
    pub ranked: Vec<usize>,
    pub rounds: Option<usize>,
    pub termination: Option<Termination>,
    pub trace: Option<Trace>,
    /// Set when the user must be left out of the metrics.
    pub excluded: Option<String>,
}

impl UserOutcome {
    pub fn ranked(ranked: Vec<usize>) -> Self {
        Self { ranked, ..Self::default() }
    }
}

/// A system under test.
pub trait Recommender: Sync {
    fn name(&self) -> String;
    fn recommend(&self, h: &UserHistory, n: usize) -> Result<UserOutcome, EvalError>;
}

pub struct BackboneSystem<'a> {
    pub params: &'a BackboneParams,
}

impl Recommender for BackboneSystem<'_> {
    fn name(&self) -> String {
        "backbone".into()
    }

    fn recommend(&self, h: &UserHistory, n: usize) -> Result<UserOutcome, EvalError> {
        let hist = h.test_input();
        let exclude: BTreeSet<usize> = hist.iter().copied().collect();
        let top = top_k(self.params, &hist, n, &exclude)?;
        Ok(UserOutcome::ranked(top.items.into_iter().map(|(i, _)| i).collect()))
    }
}

pub struct AttrToolSystem<'a> {
    pub tool: &'a RetrievalTool,
    pub split: &'a DatasetSplit,
}

impl Recommender for AttrToolSystem<'_> {
    fn name(&self) -> String {
        format!("attr:{}", self.tool.attribute())
    }

    fn recommend(&self, h: &UserHistory, n: usize) -> Result<UserOutcome, EvalError> {
        let hist = h.test_input();
        let exclude: BTreeSet<usize> = hist.iter().copied().collect();
        let scores = self.tool.scores(&self.split.catalog, &hist)?;
        Ok(UserOutcome::ranked(rank_scores(&scores, n, &exclude).items.into_iter().map(|(i, _)| i).collect()))
    }
}

fn agent_outcome(r: crate::agent::AgentResult) -> UserOutcome {
    let excluded = (r.termination == Termination::BackendFailure).then(|| "backend_failure".to_string());
    UserOutcome {
        ranked: r.final_ids(),
        rounds: Some(r.rounds),
        termination: Some(r.termination),
        trace: Some(r.trace),
        excluded,
    }
}

pub struct AgentSystem<'a> {
    pub registry: &'a ToolRegistry,
    pub backend: &'a dyn ChatBackend,
    pub config: AgentConfig,
    pub plan_mode: bool,
}

impl Recommender for AgentSystem<'_> {
    fn name(&self) -> String {
        if self.plan_mode { "w_plan".into() } else { "agent".into() }
    }

    fn recommend(&self, h: &UserHistory, n: usize) -> Result<UserOutcome, EvalError> {
        let cfg = AgentConfig { n, ..self.config.clone() };
        let r = if self.plan_mode {
            run_plan_mode(h, self.registry, self.backend, &cfg)?
        } else {
            run_episode(h, self.registry, self.backend, &cfg)?
        };
        Ok(agent_outcome(r))
    }
}

pub const ABLATION_POOL: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    WSingle,
    WMulti,
    WPlan,
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "w_single" => Ok(AblationMode::WSingle),
            "w_multi" => Ok(AblationMode::WMulti),
            "w_plan" => Ok(AblationMode::WPlan),
            _ => Err(format!("unknown ablation mode `{s}` (expected w_single, w_multi, or w_plan)")),
        }
    }
}

impl AblationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::WSingle => "w_single",
            AblationMode::WMulti => "w_multi",
            AblationMode::WPlan => "w_plan",
        }
    }
}

/// Per-source share of the w_multi pool: `ceil(30 / (tools + 1))`.
pub fn multi_share(num_tools: usize) -> usize {
    ABLATION_POOL.div_ceil(num_tools + 1)
}

/// Candidate lists for the one-shot ablations, one per source, each marked
/// with its source. Entries are deduplicated across lists and capped at 30 in total.
pub fn ablation_pool(
    registry: &ToolRegistry,
    history: &[usize],
    mode: AblationMode,
) -> Result<Vec<CandidateList>, EvalError> {
    let exclude: BTreeSet<usize> = history.iter().copied().collect();
    let backbone_list = |k: usize| -> Result<CandidateList, EvalError> {
        let top = top_k(&registry.backbone, history, k, &exclude)?;
        Ok(CandidateList {
            entries: top
                .items
                .into_iter()
                .map(|(i, s)| CandidateEntry { item: i, name: registry.catalog.name(i).into(), confidence: (s as f64 * 1e4).round() / 1e4 })
                .collect(),
            mark: ToolMark { tool_type: ToolType::Retrieval, attribute: "backbone".into(), round: 1 },
        })
    };
    let mut lists = match mode {
        AblationMode::WSingle => vec![backbone_list(ABLATION_POOL)?],
        AblationMode::WMulti => {
            let share = multi_share(registry.retrieval.len());
            let mut v = vec![backbone_list(share)?];
            for t in &registry.retrieval {
                v.push(registry.run_retrieval(t.attribute(), history, share.min(registry.k_max), 1, &exclude)?);
            }
            v
        }
        AblationMode::WPlan => Vec::new(),
    };
    let mut seen = HashSet::new();
    let mut total = 0;
    for l in &mut lists {
        l.entries.retain(|e| {
            let keep = total < ABLATION_POOL && seen.insert(e.item);
            if keep {
                total += 1;
            }
            keep
        });
    }
    Ok(lists)
}

/// The "w/ single", "w/ multi", and "w/ Plan" variants.
pub struct AblationSystem<'a> {
    pub mode: AblationMode,
    pub registry: &'a ToolRegistry,
    pub backend: &'a dyn ChatBackend,
    /// Attribute named in the rank instruction; defaults to the first tool's.
    pub rank_attribute: Option<String>,
    pub config: AgentConfig,
}

impl Recommender for AblationSystem<'_> {
    fn name(&self) -> String {
        self.mode.as_str().into()
    }

    fn recommend(&self, h: &UserHistory, n: usize) -> Result<UserOutcome, EvalError> {
        if self.mode == AblationMode::WPlan {
            let sys = AgentSystem { registry: self.registry, backend: self.backend, config: self.config.clone(), plan_mode: true };
            return sys.recommend(h, n);
        }
        let history = h.test_input();
        let attribute = match &self.rank_attribute {
            Some(a) => a.clone(),
            None => self.registry.attributes().into_iter().next().ok_or_else(|| EvalError::MissingArtifact("retrieval tool".into()))?,
        };
        let mut memory = self.registry.new_memory();
        for l in ablation_pool(self.registry, &history, self.mode)? {
            memory.store(l);
        }
        match self.registry.run_rank(&history, &mut memory, &attribute, n, 2, self.backend) {
            Ok(o) => Ok(UserOutcome { ranked: o.list.ids(), rounds: Some(1), ..UserOutcome::default() }),
            Err(ToolError::Llm(crate::llm::LlmError::BackendUnavailable { .. })) => {
                Ok(UserOutcome { excluded: Some("backend_failure".into()), ..UserOutcome::default() })
            }
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub trial: usize,
    pub user: usize,
    pub target: usize,
    /// 1-based rank of the target in the returned list.
    pub rank: Option<usize>,
    pub rounds: Option<usize>,
    pub termination: Option<Termination>,
    pub excluded: Option<String>,
    pub ranked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    pub trial: usize,
    pub seed: u64,
    pub sampled: usize,
    pub evaluated: usize,
    pub excluded: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub system: String,
    pub n: usize,
    pub protocol: Protocol,
    pub trials: Vec<TrialMetrics>,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub users: Vec<UserRecord>,
    pub traces: Vec<Trace>,
    pub config_digest: String,
}

/// Runs `system` over `trials` user samples and aggregates Recall@N and NDCG@N.
/// `config` is folded into the report's config digest.
pub fn run_experiment(
    split: &DatasetSplit,
    system: &dyn Recommender,
    protocol: &Protocol,
    config: &str,
) -> Result<EvalReport, EvalError> {
    if split.histories.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let n = protocol.n;
    let mut trials = Vec::new();
    let mut users = Vec::new();
    let mut traces = Vec::new();
    for t in 1..=protocol.trials {
        let sample = sample_users(split.histories.len(), protocol.users_per_trial, protocol.base_seed, t);
        let run = |&u: &usize| -> Result<UserOutcome, EvalError> { system.recommend(&split.histories[u], n) };
        let outcomes: Vec<UserOutcome> = if protocol.parallel {
            sample.par_iter().map(run).collect::<Result<_, _>>()?
        } else {
            sample.iter().map(run).collect::<Result<_, _>>()?
        };
        let (mut recall, mut ndcg, mut evaluated, mut excluded) = (0.0, 0.0, 0usize, 0usize);
        for (&u, o) in sample.iter().zip(outcomes) {
            let h = &split.histories[u];
            if o.excluded.is_some() {
                excluded += 1;
            } else {
                recall += recall_at_n(&o.ranked, h.target, n);
                ndcg += ndcg_at_n(&o.ranked, h.target, n);
                evaluated += 1;
            }
            users.push(UserRecord {
                trial: t,
                user: h.user_id,
                target: h.target,
                rank: o.ranked.iter().position(|&i| i == h.target).map(|p| p + 1),
                rounds: o.rounds,
                termination: o.termination,
                excluded: o.excluded,
                ranked: o.ranked,
            });
            if let Some(tr) = o.trace {
                traces.push(tr);
            }
        }
        let denom = evaluated.max(1) as f64;
        trials.push(TrialMetrics {
            trial: t,
            seed: protocol.base_seed.wrapping_add(t as u64),
            sampled: sample.len(),
            evaluated,
            excluded,
            recall: recall / denom,
            ndcg: ndcg / denom,
        });
    }
    let (recall_mean, recall_std) = mean_std(&trials.iter().map(|t| t.recall).collect::<Vec<_>>());
    let (ndcg_mean, ndcg_std) = mean_std(&trials.iter().map(|t| t.ndcg).collect::<Vec<_>>());
    let config_digest = hex::encode(Sha256::digest(format!("{}\n{:?}\n{config}", system.name(), protocol).as_bytes()));
    Ok(EvalReport {
        system: system.name(),
        n,
        protocol: protocol.clone(),
        trials,
        recall_mean,
        recall_std,
        ndcg_mean,
        ndcg_std,
        users,
        traces,
        config_digest,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let n = self.n;
        let p = &self.protocol;
        let mut s = String::new();
        let _ = writeln!(s, "system: {}", self.system);
        let _ = writeln!(s, "N={n} users_per_trial={} trials={} base_seed={}", p.users_per_trial, p.trials, p.base_seed);
        let _ = writeln!(s, "{:>5} {:>6} {:>8} {:>9} {:>10} {:>10}", "trial", "seed", "users", "excluded", format!("Recall@{n}"), format!("NDCG@{n}"));
        for t in &self.trials {
            let _ = writeln!(s, "{:>5} {:>6} {:>8} {:>9} {:>10.4} {:>10.4}", t.trial, t.seed, t.evaluated, t.excluded, t.recall, t.ndcg);
        }
        let _ = writeln!(s, "Recall@{n} = {:.4} ± {:.4}", self.recall_mean, self.recall_std);
        let _ = writeln!(s, "NDCG@{n} = {:.4} ± {:.4}", self.ndcg_mean, self.ndcg_std);
        let _ = writeln!(s, "config digest: {}", self.config_digest);
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("trial\tseed\tsampled\tevaluated\texcluded\trecall\tndcg\n");
        for t in &self.trials {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}", t.trial, t.seed, t.sampled, t.evaluated, t.excluded, t.recall, t.ndcg);
        }
        let _ = writeln!(s, "mean\t\t\t\t\t{:.6}\t{:.6}", self.recall_mean, self.ndcg_mean);
        let _ = writeln!(s, "std\t\t\t\t\t{:.6}\t{:.6}", self.recall_std, self.ndcg_std);
        s
    }

    /// One line per sampled user.
    pub fn users_text(&self) -> String {
        let mut s = String::from("trial\tuser\ttarget\trank\trounds\ttermination\tstatus\n");
        for u in &self.users {
            let opt = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                u.trial,
                u.user,
                u.target,
                opt(u.rank),
                opt(u.rounds),
                u.termination.map_or("-".to_string(), |t| t.to_string()),
                u.excluded.as_deref().unwrap_or("ok")
            );
        }
        s
    }
}

/// Termination-round counts: all episodes ("His") and those whose final
/// list contains the target ("Hit").
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundsHistogram {
    pub bins: BTreeMap<usize, (usize, usize)>,
}

pub fn rounds_report(summaries: &[EpisodeSummary]) -> RoundsHistogram {
    let mut h = RoundsHistogram::default();
    for s in summaries {
        let b = h.bins.entry(s.rounds).or_insert((0, 0));
        b.0 += 1;
        if s.hit {
            b.1 += 1;
        }
    }
    h
}

impl RoundsHistogram {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("round\this\thit\n");
        for (r, (his, hit)) in &self.bins {
            let _ = writeln!(s, "{r}\t{his}\t{hit}");
        }
        s
    }
}
