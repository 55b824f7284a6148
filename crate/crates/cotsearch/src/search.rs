//! The inference-time search loop: pause at each decision point, look one
//! operator ahead, score every branch with the dual-factor heuristic, and
//! select through a temperature softmax.
//!
//! One rollout is strictly sequential (every decision conditions on the
//! committed prefix); lookaheads within a decision are side-effect free, and
//! distinct queries parallelize with independent rollout seeds.

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::heads::{potential_forward, progress_forward, PotentialHead, ProgressHead};
use crate::rng::{hash_str, mix, salt, stream};
use crate::trace::{
    FeatureVector, Operator, OperatorSet, Query, ReasoningStep, ReasoningTrace, Termination,
};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How the selection step turns scores into a choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Draw from the softmax policy.
    Sample,
    /// Take the maximal score, ties to the lowest operator id.
    Argmax,
}

/// Everything that determines a search run given a backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Weight of the progress term in the composite score.
    pub lambda: f64,
    /// Softmax temperature of the selection policy.
    pub tau: f64,
    pub step_budget: usize,
    pub token_budget: u64,
    pub operator_set: OperatorSet,
    pub use_potential: bool,
    pub use_progress: bool,
    pub seed: u64,
    pub sampling: SelectionMode,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 1.0,
            step_budget: 50,
            token_budget: 4096,
            operator_set: OperatorSet::random8(),
            use_potential: true,
            use_progress: true,
            seed: 0,
            sampling: SelectionMode::Sample,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Data("tau must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Data("lambda must be non-negative".into()));
        }
        if self.step_budget == 0 || self.token_budget == 0 {
            return Err(Error::Data("budgets must be at least 1".into()));
        }
        Ok(())
    }

    pub fn budget_limits(&self) -> crate::trace::BudgetLimits {
        crate::trace::BudgetLimits {
            step_budget: self.step_budget,
            token_budget: self.token_budget,
        }
    }
}

/// Deterministic per-rollout seed for a query and repeat index.
pub fn rollout_seed(cfg_seed: u64, query_id: &str, repeat: u64) -> u64 {
    mix(mix(cfg_seed, hash_str(query_id)), repeat)
}

/// One scored branch at a decision point.
#[derive(Debug, Clone)]
pub struct BranchScore {
    pub operator: Operator,
    /// Potential-head logit at this operator (evaluated at the decision
    /// state, not the lookahead).
    pub potential: f64,
    /// Progress-head value at the lookahead state.
    pub progress: f64,
    /// Composite score with ablation flags and lambda applied.
    pub total: f64,
}

/// Per-decision diagnostics. Serializes to the streamable JSONL form
/// `{step_index, scores: [{operator_id, potential, progress, S}],
/// P_search, chosen}`.
#[derive(Debug, Clone, Serialize)]
pub struct DecisionRecord {
    pub step_index: usize,
    pub scores: Vec<BranchScore>,
    #[serde(rename = "P_search")]
    pub p_search: Vec<f64>,
    pub chosen: usize,
}

impl Serialize for BranchScore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("BranchScore", 4)?;
        st.serialize_field("operator_id", &self.operator.id)?;
        st.serialize_field("potential", &self.potential)?;
        st.serialize_field("progress", &self.progress)?;
        st.serialize_field("S", &self.total)?;
        st.end()
    }
}

/// Lookahead feature for one candidate operator; side-effect free on the
/// committed state.
pub fn lookahead<B: Backend>(
    backend: &B,
    state: &B::State,
    op: &Operator,
) -> Result<FeatureVector> {
    backend.apply_operator(state, op).map(|(_, f)| f)
}

/// Composite scores for every operator: the potential logit at the decision
/// state plus `lambda` times the progress estimate at the lookahead state.
/// Disabled components contribute exactly zero.
pub fn score_branches(
    h_t: &FeatureVector,
    lookaheads: &[(Operator, FeatureVector)],
    pot: &PotentialHead,
    prog: &ProgressHead,
    cfg: &SearchConfig,
) -> Result<Vec<BranchScore>> {
    let (logits, _) = potential_forward(pot, h_t)?;
    let mut scores = Vec::with_capacity(lookaheads.len());
    for (op, h_look) in lookaheads {
        let potential = *logits
            .get(op.id)
            .ok_or(Error::UnknownOperator { id: op.id })?;
        let progress = progress_forward(prog, h_look)?;
        let mut total = 0.0;
        if cfg.use_potential {
            total += potential;
        }
        if cfg.use_progress {
            total += cfg.lambda * progress;
        }
        scores.push(BranchScore {
            operator: op.clone(),
            potential,
            progress,
            total,
        });
    }
    Ok(scores)
}

/// The softmax search policy over branch scores, max-subtracted for
/// stability. Returns the chosen operator and the full policy vector.
pub fn select_operator(
    scores: &[BranchScore],
    tau: f64,
    mode: SelectionMode,
    rng: &mut ChaCha8Rng,
) -> (Operator, Vec<f64>) {
    assert!(!scores.is_empty(), "scores must be non-empty");
    assert!(tau > 0.0, "tau must be positive");
    let max = scores
        .iter()
        .map(|s| s.total)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| ((s.total - max) / tau).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    let p_search: Vec<f64> = exps.into_iter().map(|e| e / z).collect();
    let idx = match mode {
        SelectionMode::Argmax => {
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if s.total > scores[best].total {
                    best = i;
                }
            }
            best
        }
        SelectionMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = p_search.len() - 1;
            for (i, &p) in p_search.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    (scores[idx].operator.clone(), p_search)
}

/// What drives operator choice at decision points.
pub(crate) enum RolloutPolicy<'a, B: Backend> {
    /// No intervention: the backend picks its own step openings.
    Natural,
    /// Uniform over the configured operator set.
    Uniform,
    /// Dual-factor heuristic search.
    Heads {
        pot: &'a PotentialHead,
        prog: &'a ProgressHead,
    },
    /// A planner distribution whose argmax is forced (hybrid guidance).
    Planner(&'a dyn Fn(&B::State) -> Vec<f64>),
}

pub(crate) struct RolloutOutput {
    pub trace: ReasoningTrace,
    pub decisions: Vec<DecisionRecord>,
    pub forced_tokens: u64,
}

fn check_setup<B: Backend>(backend: &B, cfg: &SearchConfig) -> Result<()> {
    cfg.validate()?;
    for op in cfg.operator_set.iter() {
        match backend.operator_set().get(op.id) {
            Some(known) if known.text == op.text => {}
            _ => {
                return Err(Error::Data(format!(
                    "config operator {:?} (id {}) is unknown to the backend",
                    op.text, op.id
                )))
            }
        }
    }
    Ok(())
}

fn check_heads<B: Backend>(
    backend: &B,
    cfg: &SearchConfig,
    pot: &PotentialHead,
    prog: &ProgressHead,
) -> Result<()> {
    if pot.dim() != backend.feature_dim() {
        return Err(Error::DimMismatch {
            expected: backend.feature_dim(),
            got: pot.dim(),
        });
    }
    if prog.dim() != backend.feature_dim() {
        return Err(Error::DimMismatch {
            expected: backend.feature_dim(),
            got: prog.dim(),
        });
    }
    if pot.n_ops() != cfg.operator_set.len() {
        return Err(Error::DimMismatch {
            expected: cfg.operator_set.len(),
            got: pot.n_ops(),
        });
    }
    Ok(())
}

pub(crate) fn run_rollout<B: Backend>(
    query: &Query,
    backend: &B,
    policy: RolloutPolicy<'_, B>,
    cfg: &SearchConfig,
    roll_seed: u64,
    policy_tag: &str,
) -> Result<RolloutOutput> {
    check_setup(backend, cfg)?;
    let mut state = backend.begin(query, roll_seed)?;
    let mut select_rng = stream(roll_seed, &[salt::SELECT]);
    let mut steps: Vec<ReasoningStep> = Vec::new();
    let mut decisions: Vec<DecisionRecord> = Vec::new();
    let mut forced_tokens: u64 = 0;

    // The first step is never intervened.
    let mut out = backend.generate_step(&mut state)?;
    steps.push(ReasoningStep::new(None, out.tokens.clone()));
    let terminated_by = loop {
        if out.done {
            break Termination::Answer;
        }
        if steps.len() >= cfg.step_budget {
            break Termination::StepBudget;
        }
        if ReasoningTrace::total_tokens_for(&steps) >= cfg.token_budget {
            break Termination::TokenBudget;
        }
        let entry = out.features.clone();
        let mut lookahead_chosen: Option<FeatureVector> = None;
        let chosen: Option<Operator> = match &policy {
            RolloutPolicy::Natural => None,
            RolloutPolicy::Uniform => {
                let idx = select_rng.gen_range(0..cfg.operator_set.len());
                Some(cfg.operator_set.get(idx).expect("in range").clone())
            }
            RolloutPolicy::Heads { pot, prog } => {
                let mut looks = Vec::with_capacity(cfg.operator_set.len());
                for op in cfg.operator_set.iter() {
                    looks.push((op.clone(), lookahead(backend, &state, op)?));
                }
                let scores = score_branches(&entry, &looks, pot, prog, cfg)?;
                let (op, p_search) =
                    select_operator(&scores, cfg.tau, cfg.sampling, &mut select_rng);
                lookahead_chosen = Some(looks[op.id].1.clone());
                decisions.push(DecisionRecord {
                    step_index: steps.len() + 1,
                    chosen: op.id,
                    scores,
                    p_search,
                });
                Some(op)
            }
            RolloutPolicy::Planner(f) => {
                let dist = f(&state);
                let mut best = 0;
                for (i, &p) in dist.iter().enumerate() {
                    if p > dist[best] {
                        best = i;
                    }
                }
                Some(
                    cfg.operator_set
                        .get(best)
                        .ok_or_else(|| {
                            Error::Data(
                                "planner distribution does not match the operator set".into(),
                            )
                        })?
                        .clone(),
                )
            }
        };
        match chosen {
            None => {
                out = backend.generate_step(&mut state)?;
                let op = out
                    .tokens
                    .first()
                    .and_then(|t| cfg.operator_set.by_text(t))
                    .cloned();
                let mut step = ReasoningStep::new(op, out.tokens.clone());
                step.entry_features = Some(entry);
                steps.push(step);
            }
            Some(op) => {
                let (committed, h_look) = backend.apply_operator(&state, &op)?;
                state = committed;
                out = backend.generate_step(&mut state)?;
                forced_tokens += 1;
                let mut step = ReasoningStep::new(Some(op), out.tokens.clone());
                step.entry_features = Some(entry);
                step.lookahead_features = Some(lookahead_chosen.unwrap_or_else(|| h_look.clone()));
                steps.push(step);
            }
        }
    };
    let total_tokens = ReasoningTrace::total_tokens_for(&steps);
    let correct = backend.judge(&state, query);
    Ok(RolloutOutput {
        trace: ReasoningTrace {
            query_id: query.id.clone(),
            steps,
            total_tokens,
            correct,
            terminated_by,
            policy_tag: policy_tag.to_string(),
            seed: backend.effective_seed(query, roll_seed),
        },
        decisions,
        forced_tokens,
    })
}

/// Run the dual-factor search on one query (repeat 0).
pub fn run_search<B: Backend>(
    query: &Query,
    backend: &B,
    pot: &PotentialHead,
    prog: &ProgressHead,
    cfg: &SearchConfig,
) -> Result<ReasoningTrace> {
    run_search_indexed(query, backend, pot, prog, cfg, 0).map(|(t, _)| t)
}

/// Run the search for a specific repeat index, returning per-decision
/// diagnostics alongside the trace.
pub fn run_search_indexed<B: Backend>(
    query: &Query,
    backend: &B,
    pot: &PotentialHead,
    prog: &ProgressHead,
    cfg: &SearchConfig,
    repeat: u64,
) -> Result<(ReasoningTrace, Vec<DecisionRecord>)> {
    check_heads(backend, cfg, pot, prog)?;
    let seed = rollout_seed(cfg.seed, &query.id, repeat);
    let out = run_rollout(
        query,
        backend,
        RolloutPolicy::Heads { pot, prog },
        cfg,
        seed,
        "ncots",
    )?;
    Ok((out.trace, out.decisions))
}

/// Unintervened rollout: the backend's own policy picks every step opening.
pub fn rollout_natural<B: Backend>(
    query: &Query,
    backend: &B,
    cfg: &SearchConfig,
    repeat: u64,
) -> Result<ReasoningTrace> {
    let seed = rollout_seed(cfg.seed, &query.id, repeat);
    run_rollout::<B>(
        query,
        backend,
        RolloutPolicy::Natural,
        cfg,
        seed,
        "original",
    )
    .map(|o| o.trace)
}

/// Hybrid guidance: at every decision point the planner's argmax operator
/// is forced as a single token and the executor generates the rest of the
/// step. Returns the trace and the fraction of tokens that were forced.
pub fn run_hybrid_guidance<B, P>(
    query: &Query,
    executor: &B,
    planner: P,
    cfg: &SearchConfig,
    repeat: u64,
) -> Result<(ReasoningTrace, f64)>
where
    B: Backend,
    P: Fn(&B::State) -> Vec<f64>,
{
    let seed = rollout_seed(cfg.seed, &query.id, repeat);
    let out = run_rollout(
        query,
        executor,
        RolloutPolicy::Planner(&planner),
        cfg,
        seed,
        "hybrid",
    )?;
    let fraction = if out.trace.total_tokens == 0 {
        0.0
    } else {
        out.forced_tokens as f64 / out.trace.total_tokens as f64
    };
    Ok((out.trace, fraction))
}
