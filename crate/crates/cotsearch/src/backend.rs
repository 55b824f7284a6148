//! The step-generation contract and the synthetic reasoning environment.
//!
//! The environment stands in for a reasoning model: it produces delimiter-
//! separated steps, exposes feature vectors in place of hidden states, and
//! supports one-token lookahead. Its latent state is a small work-tracking
//! machine — remaining work `r`, an error flag `e`, a branch quality `q` —
//! whose dynamics are keyed to the operator classes:
//!
//! - statement tokens advance the work counter and may inject an error;
//! - the reflection token leaves work untouched and may clear the error;
//! - the divergence token resamples the branch quality;
//! - setup tokens only cost tokens.
//!
//! Reflection steps are longer than statement steps, so redundant
//! verification inflates length here just as it does in real traces, and a
//! search policy has something real to prune. Every stochastic draw is
//! keyed by `(rollout seed, purpose, per-class counter)`: rollouts with a
//! shared seed see common random numbers no matter which operator sequence
//! they follow, and replay reconstructs a rollout's state trajectory
//! exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::heads::{softmax_stable, TeacherSample};
use crate::rng::{mix, salt, stream, unit};
use crate::trace::{FeatureVector, Operator, OperatorSet, Query, ReasoningTrace};
use crate::{Error, Result};

/// One generated step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub tokens: Vec<String>,
    /// Feature vector at the position just generated: the trailing
    /// delimiter for a non-final step (the next decision point), the last
    /// body token for the final one.
    pub features: FeatureVector,
    pub done: bool,
}

/// The abstract model interface the search engine drives. All randomness is
/// derived from the `run_seed` passed to [`Backend::begin`], so a state is
/// a self-contained deterministic generator.
pub trait Backend {
    type State: Clone + Send;

    fn feature_dim(&self) -> usize;

    /// The action space this backend understands.
    fn operator_set(&self) -> &OperatorSet;

    fn begin(&self, query: &Query, run_seed: u64) -> Result<Self::State>;

    /// The seed that fully determines the draws of a rollout started with
    /// `begin(query, run_seed)`. Recorded in traces so replay can
    /// reconstruct the exact state trajectory.
    fn effective_seed(&self, query: &Query, run_seed: u64) -> u64 {
        let _ = query;
        run_seed
    }

    /// Generate the next step. Without a prior [`Backend::apply_operator`],
    /// the backend picks the step's opening token itself; after one, the
    /// step begins with the applied operator.
    fn generate_step(&self, state: &mut Self::State) -> Result<StepOutput>;

    /// Append one operator token without committing: returns the lookahead
    /// state and the lookahead features. Side-effect free on `state`;
    /// repeated calls return identical results.
    fn apply_operator(
        &self,
        state: &Self::State,
        op: &Operator,
    ) -> Result<(Self::State, FeatureVector)>;

    fn judge(&self, state: &Self::State, query: &Query) -> bool;

    /// Feature vectors for every token position `1..=L` of a completed
    /// trace, reconstructed exactly as the original rollout produced them.
    fn replay_features(&self, trace: &ReasoningTrace) -> Result<Vec<FeatureVector>>;
}

/// Functional class of an operator token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorClass {
    Statement,
    Reflection,
    Divergence,
    Setup,
}

impl OperatorClass {
    /// Class of a token text, following the observed operator-to-mode
    /// correspondence (the terminal summary is a statement that exhausts
    /// the work counter).
    pub fn of(text: &str) -> Option<Self> {
        match text {
            "The" | "Thus" | "Therefore" | "So" | "Then" | "Now" | "First" | "I" => {
                Some(Self::Statement)
            }
            "Wait" => Some(Self::Reflection),
            "Alternatively" => Some(Self::Divergence),
            "Let" | "Option" | "**" | "-" | "\\[" | "\\" => Some(Self::Setup),
            _ => None,
        }
    }

    fn id(self) -> u64 {
        match self {
            Self::Statement => 0,
            Self::Reflection => 1,
            Self::Divergence => 2,
            Self::Setup => 3,
        }
    }
}

const INTRO_CLASS_ID: u64 = 4;

/// Inclusive token-count ranges per step class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTokenRanges {
    pub intro: (u32, u32),
    pub statement: (u32, u32),
    pub reflection: (u32, u32),
    pub divergence: (u32, u32),
    pub setup: (u32, u32),
}

impl Default for StepTokenRanges {
    fn default() -> Self {
        Self {
            intro: (12, 20),
            statement: (28, 44),
            reflection: (48, 80),
            divergence: (20, 36),
            setup: (8, 16),
        }
    }
}

impl StepTokenRanges {
    fn range(&self, class: Option<OperatorClass>) -> (u32, u32) {
        match class {
            None => self.intro,
            Some(OperatorClass::Statement) => self.statement,
            Some(OperatorClass::Reflection) => self.reflection,
            Some(OperatorClass::Divergence) => self.divergence,
            Some(OperatorClass::Setup) => self.setup,
        }
    }

    fn mean(range: (u32, u32)) -> f64 {
        (range.0 + range.1) as f64 / 2.0
    }
}

/// Parameters of the synthetic environment. Immutable and shareable; the
/// seed fixes the feature embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub feature_dim: usize,
    /// Inclusive range the initial remaining-work counter is drawn from
    /// when generating queries.
    pub work_init_range: (u32, u32),
    /// Error probability per non-terminal statement step, scaled by `1 - q`.
    pub error_inject_prob: f64,
    /// Probability a reflection step clears the error flag.
    pub fix_prob: f64,
    pub initial_branch_quality: f64,
    /// Discrete distribution the branch quality is resampled from on a
    /// divergence step: `(value, probability)` pairs summing to one.
    pub branch_resample: Vec<(f64, f64)>,
    pub step_tokens: StepTokenRanges,
    pub noise_sigma: f64,
    /// Token-sampling temperature of the unguided policy.
    pub token_temperature: f64,
    /// Nucleus parameter, recorded for real-model adapters; the synthetic
    /// environment samples its small operator vocabulary exactly, so this
    /// is a no-op here.
    pub top_p: f64,
    pub operator_set: OperatorSet,
    pub seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            work_init_range: (2, 6),
            error_inject_prob: 0.3,
            fix_prob: 0.9,
            initial_branch_quality: 0.55,
            branch_resample: vec![(0.15, 0.15), (0.45, 0.2), (0.7, 0.4), (0.9, 0.25)],
            step_tokens: StepTokenRanges::default(),
            noise_sigma: 0.05,
            token_temperature: 0.6,
            top_p: 0.95,
            operator_set: OperatorSet::random8(),
            seed: 0,
        }
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Data("feature_dim must be positive".into()));
        }
        if self.work_init_range.0 == 0 || self.work_init_range.0 > self.work_init_range.1 {
            return Err(Error::Data(
                "work_init_range must be a non-empty range starting at 1 or more".into(),
            ));
        }
        for (name, p) in [
            ("error_inject_prob", self.error_inject_prob),
            ("fix_prob", self.fix_prob),
            ("initial_branch_quality", self.initial_branch_quality),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Data(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.branch_resample.is_empty() {
            return Err(Error::Data("branch_resample must not be empty".into()));
        }
        let total: f64 = self.branch_resample.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 || self.branch_resample.iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::Data(
                "branch_resample probabilities must be non-negative and sum to 1".into(),
            ));
        }
        let ranges = [
            self.step_tokens.intro,
            self.step_tokens.statement,
            self.step_tokens.reflection,
            self.step_tokens.divergence,
            self.step_tokens.setup,
        ];
        if ranges.iter().any(|(lo, hi)| *lo == 0 || lo > hi) {
            return Err(Error::Data(
                "step token ranges must be non-empty and start at 1 or more".into(),
            ));
        }
        if StepTokenRanges::mean(self.step_tokens.reflection)
            <= StepTokenRanges::mean(self.step_tokens.statement)
        {
            return Err(Error::Data(
                "reflection steps must be longer than statement steps on average".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Data("noise_sigma must be non-negative".into()));
        }
        if self.token_temperature <= 0.0 {
            return Err(Error::Data("token_temperature must be positive".into()));
        }
        for op in self.operator_set.iter() {
            if OperatorClass::of(&op.text).is_none() {
                return Err(Error::Data(format!(
                    "operator {:?} has no environment class",
                    op.text
                )));
            }
        }
        Ok(())
    }
}

/// One synthetic problem instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvQuery {
    pub id: String,
    pub r0: u32,
    pub seed: u64,
}

impl EnvQuery {
    /// Encode the instance parameters as prompt tokens so the generic
    /// [`Query`] type carries everything the environment needs.
    pub fn to_query(&self) -> Query {
        Query {
            id: self.id.clone(),
            prompt: vec![format!("work:{}", self.r0), format!("qseed:{}", self.seed)],
            answer_key: format!("r0={}", self.r0),
        }
    }
}

/// Generate a deterministic query set from the spec's work range.
pub fn gen_queries(spec: &EnvSpec, n: usize, seed: u64) -> Vec<EnvQuery> {
    (0..n)
        .map(|i| {
            let span = (spec.work_init_range.1 - spec.work_init_range.0 + 1) as f64;
            let u = unit(seed, &[salt::QUERY, i as u64]);
            EnvQuery {
                id: format!("q{i:05}"),
                r0: spec.work_init_range.0 + (u * span) as u32,
                seed: mix(seed, mix(salt::QUERY, i as u64)),
            }
        })
        .collect()
}

/// How the unguided policy picks step-opening tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefaultMode {
    /// Softmax at the spec's token temperature.
    Sampled,
    /// Deterministic argmax (ties to the lowest operator id).
    Greedy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ClassCounters {
    statement: u32,
    reflection: u32,
    divergence: u32,
    setup: u32,
}

impl ClassCounters {
    fn bump(&mut self, class: OperatorClass) -> u32 {
        let slot = match class {
            OperatorClass::Statement => &mut self.statement,
            OperatorClass::Reflection => &mut self.reflection,
            OperatorClass::Divergence => &mut self.divergence,
            OperatorClass::Setup => &mut self.setup,
        };
        *slot += 1;
        *slot
    }
}

/// Latent rollout state: private to each rollout, cheap to clone for
/// lookahead.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub remaining_work: u32,
    pub error_flag: bool,
    pub branch_quality: f64,
    /// Committed steps so far.
    pub steps_done: u32,
    /// Index of the last emitted token, delimiters included.
    pub token_pos: u64,
    pub done: bool,
    rollout_seed: u64,
    counters: ClassCounters,
    pending: Option<Operator>,
}

/// Everything the latent encoder sees for one feature emission.
struct LatentView {
    r_eff: u32,
    error: bool,
    quality: f64,
    step: u32,
    token_pos: u64,
    last_op: Option<usize>,
}

const STATE_COORDS: usize = 6;
const STEP_NORM: f64 = 50.0;

/// The synthetic environment. Also exposes the teacher policy used for
/// distillation and hybrid guidance.
#[derive(Debug, Clone)]
pub struct EnvBackend {
    spec: EnvSpec,
    mode: DefaultMode,
    /// feature_dim rows of latent_dim columns, columns unit-normalized.
    embedding: Vec<Vec<f64>>,
    mean_statement_tokens: f64,
}

impl EnvBackend {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let latent_dim = STATE_COORDS + spec.operator_set.len();
        let mut rng = stream(spec.seed, &[salt::EMBEDDING]);
        // Gram-Schmidt over seeded Gaussian columns: orthonormal while the
        // latent fits in feature space, unit-normalized beyond that. Keeps
        // the feature map well conditioned so linear heads are learnable.
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(latent_dim);
        for col in 0..latent_dim {
            let mut v: Vec<f64> = (0..spec.feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            if col < spec.feature_dim {
                for prev in &columns[..col.min(columns.len())] {
                    let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (vi, pi) in v.iter_mut().zip(prev) {
                        *vi -= proj * pi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            columns.push(v);
        }
        let embedding: Vec<Vec<f64>> = (0..spec.feature_dim)
            .map(|row| columns.iter().map(|c| c[row]).collect())
            .collect();
        let mean_statement_tokens = StepTokenRanges::mean(spec.step_tokens.statement);
        Ok(Self {
            spec,
            mode: DefaultMode::Sampled,
            embedding,
            mean_statement_tokens,
        })
    }

    pub fn with_default_mode(mut self, mode: DefaultMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        STATE_COORDS + self.spec.operator_set.len()
    }

    /// Operator embedding rows (one row of length `feature_dim` per
    /// operator): the columns of the feature map that carry operator
    /// identity, the analogue of language-head embedding rows.
    pub fn operator_embeddings(&self) -> Vec<Vec<f64>> {
        (0..self.spec.operator_set.len())
            .map(|j| {
                self.embedding
                    .iter()
                    .map(|row| row[STATE_COORDS + j])
                    .collect()
            })
            .collect()
    }

    fn encode(&self, v: &LatentView) -> Vec<f64> {
        let mut z = vec![0.0; self.latent_dim()];
        let r_scale = self.spec.work_init_range.1.max(1) as f64;
        z[0] = 1.0;
        z[1] = v.r_eff as f64 / r_scale;
        z[2] = if v.error { 1.0 } else { 0.0 };
        z[3] = v.quality;
        z[4] = (v.step as f64).min(STEP_NORM) / STEP_NORM;
        let tok = v.token_pos as f64;
        z[5] = tok / (tok + v.r_eff as f64 * self.mean_statement_tokens + 4.0);
        if let Some(op) = v.last_op {
            z[STATE_COORDS + op] = 1.0;
        }
        z
    }

    fn feature_from_latent(&self, z: &[f64], rollout_seed: u64, pos: u64) -> FeatureVector {
        let mut values: Vec<f64> = self
            .embedding
            .iter()
            .map(|row| crate::heads::dot(row, z))
            .collect();
        if self.spec.noise_sigma > 0.0 {
            let mut rng = stream(rollout_seed, &[salt::FEATURE, pos]);
            for v in &mut values {
                *v += self.spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        FeatureVector::new(values)
    }

    fn state_feature(&self, state: &EnvState, last_op: Option<usize>) -> FeatureVector {
        let view = LatentView {
            r_eff: state.remaining_work,
            error: state.error_flag,
            quality: state.branch_quality,
            step: state.steps_done,
            token_pos: state.token_pos,
            last_op,
        };
        self.feature_from_latent(&self.encode(&view), state.rollout_seed, state.token_pos)
    }

    /// Teacher logits as an explicit matrix over the latent encoding, so
    /// the distillation target is linear in the features by construction.
    pub fn teacher_matrix(&self) -> Vec<Vec<f64>> {
        let m = self.latent_dim();
        self.spec
            .operator_set
            .iter()
            .map(|op| {
                let mut row = vec![0.0; m];
                match OperatorClass::of(&op.text).expect("validated set") {
                    OperatorClass::Statement => {
                        row[0] = 1.6 + Self::statement_offset(&op.text);
                        row[2] = -2.2;
                        row[3] = 0.4;
                    }
                    OperatorClass::Reflection => {
                        row[0] = 1.1;
                        row[2] = 4.5;
                    }
                    OperatorClass::Divergence => {
                        row[0] = 3.1;
                        row[3] = -5.0;
                    }
                    OperatorClass::Setup => {
                        row[0] = -0.4;
                    }
                }
                row
            })
            .collect()
    }

    fn statement_offset(text: &str) -> f64 {
        match text {
            "Then" => 0.4,
            "So" => 0.1,
            "Thus" => -0.1,
            "Therefore" => -0.25,
            "The" => -0.4,
            "Now" => -0.15,
            "First" => -0.3,
            "I" => -0.5,
            _ => 0.0,
        }
    }

    pub fn teacher_logits_from_latent(&self, z: &[f64]) -> Vec<f64> {
        self.teacher_matrix()
            .iter()
            .map(|row| crate::heads::dot(row, z))
            .collect()
    }

    /// The expert policy: a softmax over a fixed linear function of the
    /// latent state. Prefers reflection under an error, divergence at low
    /// branch quality, statements otherwise; full support always.
    pub fn teacher_policy(&self, state: &EnvState) -> Vec<f64> {
        let view = LatentView {
            r_eff: state.remaining_work,
            error: state.error_flag,
            quality: state.branch_quality,
            step: state.steps_done,
            token_pos: state.token_pos,
            last_op: None,
        };
        softmax_stable(&self.teacher_logits_from_latent(&self.encode(&view)))
    }

    /// Unguided-policy logits. Deliberately flawed the way small models
    /// are: a habitual verification urge every third step, only weakly
    /// coupled to the actual error flag.
    fn default_logits(&self, state: &EnvState) -> Vec<f64> {
        let e = if state.error_flag { 1.0 } else { 0.0 };
        let periodic = if state.steps_done % 3 == 2 { 1.8 } else { 0.0 };
        self.spec
            .operator_set
            .iter()
            .map(
                |op| match OperatorClass::of(&op.text).expect("validated set") {
                    OperatorClass::Statement => 2.0 + 0.4 * Self::statement_offset(&op.text),
                    OperatorClass::Reflection => 0.9 + 0.5 * e + periodic,
                    OperatorClass::Divergence => 0.2 + 0.8 * (1.0 - state.branch_quality),
                    OperatorClass::Setup => 0.0,
                },
            )
            .collect()
    }

    fn choose_default_operator(&self, state: &EnvState) -> Operator {
        let logits = self.default_logits(state);
        let idx = match self.mode {
            DefaultMode::Greedy => argmax(&logits),
            DefaultMode::Sampled => {
                let scaled: Vec<f64> = logits
                    .iter()
                    .map(|l| l / self.spec.token_temperature)
                    .collect();
                let probs = softmax_stable(&scaled);
                let mut rng = stream(
                    state.rollout_seed,
                    &[salt::OP_CHOICE, u64::from(state.steps_done)],
                );
                sample_index(&probs, rng.gen::<f64>())
            }
        };
        self.spec
            .operator_set
            .get(idx)
            .expect("index within set")
            .clone()
    }

    fn draw_tokens(&self, state: &EnvState, class: Option<OperatorClass>, counter: u32) -> u32 {
        let (lo, hi) = self.spec.step_tokens.range(class);
        let class_id = class.map_or(INTRO_CLASS_ID, OperatorClass::id);
        let u = unit(
            state.rollout_seed,
            &[salt::TOKENS, class_id, u64::from(counter)],
        );
        lo + (u * f64::from(hi - lo + 1)) as u32
    }

    /// Apply one operator's class effect to the latent state. The terminal
    /// statement (the one that exhausts the work counter) is the summary
    /// step: it ends the rollout and injects no error.
    fn apply_class_effect(&self, state: &mut EnvState, class: OperatorClass) -> u32 {
        let counter = state.counters.bump(class);
        match class {
            OperatorClass::Statement => {
                if state.remaining_work > 0 {
                    state.remaining_work -= 1;
                }
                if state.remaining_work == 0 {
                    state.done = true;
                } else {
                    let u = unit(state.rollout_seed, &[salt::ERROR, u64::from(counter)]);
                    if u < self.spec.error_inject_prob * (1.0 - state.branch_quality) {
                        state.error_flag = true;
                    }
                }
            }
            OperatorClass::Reflection => {
                if state.error_flag {
                    let u = unit(state.rollout_seed, &[salt::FIX, u64::from(counter)]);
                    if u < self.spec.fix_prob {
                        state.error_flag = false;
                    }
                }
            }
            OperatorClass::Divergence => {
                let u = unit(state.rollout_seed, &[salt::QUALITY, u64::from(counter)]);
                state.branch_quality = sample_discrete(&self.spec.branch_resample, u);
            }
            OperatorClass::Setup => {}
        }
        counter
    }

    fn parse_query(query: &Query) -> Result<(u32, u64)> {
        let mut r0 = None;
        let mut qseed = None;
        for tok in &query.prompt {
            if let Some(v) = tok.strip_prefix("work:") {
                r0 = v.parse::<u32>().ok();
            } else if let Some(v) = tok.strip_prefix("qseed:") {
                qseed = v.parse::<u64>().ok();
            }
        }
        match (r0, qseed) {
            (Some(r), Some(s)) if r >= 1 => Ok((r, s)),
            _ => Err(Error::Backend(format!(
                "query {:?} does not encode a synthetic instance (expected work:<n> and qseed:<n> prompt tokens)",
                query.id
            ))),
        }
    }

    fn check_operator(&self, op: &Operator) -> Result<()> {
        match self.spec.operator_set.get(op.id) {
            Some(known) if known.text == op.text => Ok(()),
            _ => Err(Error::Backend(format!(
                "operator {:?} (id {}) is not in set {:?}",
                op.text, op.id, self.spec.operator_set.name
            ))),
        }
    }

    /// Replay the per-step latent states of a completed trace. Calls
    /// `on_decision` with the state at each decision point (before the
    /// operator step it opens) and `on_token` with the post-effect state at
    /// every token position.
    fn walk_trace<FD, FT>(
        &self,
        trace: &ReasoningTrace,
        mut on_decision: FD,
        mut on_token: FT,
    ) -> Result<()>
    where
        FD: FnMut(&EnvState, usize),
        FT: FnMut(&EnvState, Option<usize>),
    {
        let r0 = trace
            .steps
            .iter()
            .filter(|s| {
                s.operator
                    .as_ref()
                    .is_some_and(|o| OperatorClass::of(&o.text) == Some(OperatorClass::Statement))
            })
            .count() as u32;
        let mut state = EnvState {
            remaining_work: r0,
            error_flag: false,
            branch_quality: self.spec.initial_branch_quality,
            steps_done: 0,
            token_pos: 0,
            done: false,
            rollout_seed: trace.seed,
            counters: ClassCounters::default(),
            pending: None,
        };
        let mut last_op: Option<usize> = None;
        for (i, step) in trace.steps.iter().enumerate() {
            if i > 0 {
                // The delimiter that closed the previous step.
                state.token_pos += 1;
                on_token(&state, last_op);
                on_decision(&state, i);
            }
            let class = step
                .operator
                .as_ref()
                .and_then(|o| OperatorClass::of(&o.text));
            if let Some(class) = class {
                self.apply_class_effect(&mut state, class);
            }
            state.steps_done = (i + 1) as u32;
            last_op = step.operator.as_ref().map(|o| o.id);
            for _ in 0..step.token_count {
                state.token_pos += 1;
                on_token(&state, last_op);
            }
        }
        Ok(())
    }

    /// Distillation pairs for every decision point of every trace: the
    /// stored entry features (or their replay reconstruction when absent)
    /// against the teacher's distribution at that state.
    pub fn teacher_samples(&self, traces: &[ReasoningTrace]) -> Result<Vec<TeacherSample>> {
        let mut samples = Vec::new();
        for trace in traces {
            let mut decisions: Vec<(Vec<f64>, FeatureVector)> = Vec::new();
            self.walk_trace(
                trace,
                |state, step_idx| {
                    let dist = self.teacher_policy(state);
                    let stored = trace.steps[step_idx].entry_features.clone();
                    let features = stored.unwrap_or_else(|| {
                        let last = trace.steps[step_idx - 1].operator.as_ref().map(|o| o.id);
                        self.state_feature(state, last)
                    });
                    decisions.push((dist, features));
                },
                |_, _| {},
            )?;
            samples.extend(
                decisions
                    .into_iter()
                    .map(|(teacher_dist, features)| TeacherSample {
                        features,
                        teacher_dist,
                    }),
            );
        }
        Ok(samples)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_discrete(pairs: &[(f64, f64)], u: f64) -> f64 {
    let mut acc = 0.0;
    for &(value, p) in pairs {
        acc += p;
        if u < acc {
            return value;
        }
    }
    pairs.last().expect("non-empty").0
}

impl Backend for EnvBackend {
    type State = EnvState;

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn operator_set(&self) -> &OperatorSet {
        &self.spec.operator_set
    }

    fn effective_seed(&self, query: &Query, run_seed: u64) -> u64 {
        match Self::parse_query(query) {
            Ok((_, qseed)) => mix(qseed, run_seed),
            Err(_) => run_seed,
        }
    }

    fn begin(&self, query: &Query, run_seed: u64) -> Result<EnvState> {
        let (r0, qseed) = Self::parse_query(query)?;
        Ok(EnvState {
            remaining_work: r0,
            error_flag: false,
            branch_quality: self.spec.initial_branch_quality,
            steps_done: 0,
            token_pos: 0,
            done: false,
            rollout_seed: mix(qseed, run_seed),
            counters: ClassCounters::default(),
            pending: None,
        })
    }

    fn generate_step(&self, state: &mut EnvState) -> Result<StepOutput> {
        if state.done {
            return Err(Error::Backend("generation already finished".into()));
        }
        let (op, class, counter) = if state.steps_done == 0 {
            state.pending = None;
            (None, None, 1)
        } else {
            let op = match state.pending.take() {
                Some(op) => op,
                None => self.choose_default_operator(state),
            };
            let class = OperatorClass::of(&op.text)
                .ok_or_else(|| Error::Backend(format!("operator {:?} has no class", op.text)))?;
            let counter = self.apply_class_effect(state, class);
            (Some(op), Some(class), counter)
        };
        let n = self.draw_tokens(state, class, counter).max(1);
        let mut tokens = Vec::with_capacity(n as usize);
        if let Some(op) = &op {
            tokens.push(op.text.clone());
        }
        while tokens.len() < n as usize {
            tokens.push(format!("t{}", state.token_pos + 1 + tokens.len() as u64));
        }
        state.steps_done += 1;
        state.token_pos += u64::from(n);
        if !state.done {
            state.token_pos += 1; // trailing delimiter opens the next decision point
        }
        let features = self.state_feature(state, op.as_ref().map(|o| o.id));
        Ok(StepOutput {
            tokens,
            features,
            done: state.done,
        })
    }

    fn apply_operator(&self, state: &EnvState, op: &Operator) -> Result<(EnvState, FeatureVector)> {
        self.check_operator(op)?;
        if state.done {
            return Err(Error::Backend(
                "cannot intervene after generation finished".into(),
            ));
        }
        if state.steps_done == 0 {
            return Err(Error::Backend(
                "cannot intervene before the first step".into(),
            ));
        }
        let mut next = state.clone();
        next.pending = Some(op.clone());
        let class = OperatorClass::of(&op.text).expect("checked above");
        let r_eff = if class == OperatorClass::Statement {
            state.remaining_work.saturating_sub(1)
        } else {
            state.remaining_work
        };
        let view = LatentView {
            r_eff,
            error: state.error_flag,
            quality: state.branch_quality,
            step: state.steps_done + 1,
            token_pos: state.token_pos + 1,
            last_op: Some(op.id),
        };
        let features =
            self.feature_from_latent(&self.encode(&view), state.rollout_seed, state.token_pos + 1);
        Ok((next, features))
    }

    fn judge(&self, state: &EnvState, _query: &Query) -> bool {
        state.done && !state.error_flag
    }

    fn replay_features(&self, trace: &ReasoningTrace) -> Result<Vec<FeatureVector>> {
        let mut features = Vec::with_capacity(trace.total_tokens as usize);
        self.walk_trace(
            trace,
            |_, _| {},
            |state, last_op| features.push(self.state_feature(state, last_op)),
        )?;
        Ok(features)
    }
}

/// Result of exhaustive operator-sequence search.
#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub sequence: Vec<Operator>,
    pub accuracy: f64,
    pub expected_length: f64,
}

/// Hard cap on enumeration size; refuse anything larger.
pub const MAX_ENUMERATION: u128 = 1 << 24;

/// Default rollout count per candidate sequence.
pub const DEFAULT_N_EVAL: usize = 64;

fn forced_rollout(
    env: &EnvBackend,
    query: &Query,
    run_seed: u64,
    ops: &[Operator],
) -> Result<(bool, u64)> {
    let mut state = env.begin(query, run_seed)?;
    let mut total: u64 = 0;
    let mut out = env.generate_step(&mut state)?;
    total += out.tokens.len() as u64;
    for op in ops {
        if out.done {
            break;
        }
        let (next, _) = env.apply_operator(&state, op)?;
        state = next;
        out = env.generate_step(&mut state)?;
        total += 1 + out.tokens.len() as u64; // delimiter + step body
    }
    Ok((env.judge(&state, query), total))
}

/// Enumerate every operator sequence up to `horizon`, estimate each with
/// `n_eval` common-random-number rollouts, and return the best: highest
/// accuracy, then lowest expected length, then lexicographically smallest
/// operator ids.
pub fn brute_force_optimal(
    env: &EnvBackend,
    query: &Query,
    horizon: usize,
    n_eval: usize,
    seed: u64,
) -> Result<BruteForceResult> {
    let set = env.operator_set();
    let n_ops = set.len() as u128;
    let count = n_ops
        .checked_pow(horizon as u32)
        .filter(|c| *c <= MAX_ENUMERATION)
        .ok_or(Error::HorizonTooLarge {
            horizon,
            bound: MAX_ENUMERATION,
        })?;
    let n_eval = n_eval.max(1);
    let decode = |mut code: u128| -> Vec<Operator> {
        let mut ids = vec![0usize; horizon];
        for slot in (0..horizon).rev() {
            ids[slot] = (code % n_ops) as usize;
            code /= n_ops;
        }
        ids.into_iter()
            .map(|id| set.get(id).expect("in range").clone())
            .collect()
    };
    let codes: Vec<u128> = (0..count).collect();
    let scored: Vec<(f64, f64)> = exec::par_map_result(&codes, |&code| {
        let ops = decode(code);
        let mut correct = 0usize;
        let mut total = 0u64;
        for j in 0..n_eval {
            let (ok, len) = forced_rollout(env, query, mix(seed, j as u64), &ops)?;
            correct += usize::from(ok);
            total += len;
        }
        Ok((correct as f64 / n_eval as f64, total as f64 / n_eval as f64))
    })?;
    let mut best_code = 0u128;
    let (mut best_acc, mut best_len) = scored[0];
    for (i, &(acc, len)) in scored.iter().enumerate().skip(1) {
        if acc > best_acc || (acc == best_acc && len < best_len) {
            best_code = i as u128;
            best_acc = acc;
            best_len = len;
        }
    }
    Ok(BruteForceResult {
        sequence: decode(best_code),
        accuracy: best_acc,
        expected_length: best_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec() -> EnvSpec {
        EnvSpec {
            error_inject_prob: 0.0,
            fix_prob: 0.0,
            noise_sigma: 0.0,
            ..EnvSpec::default()
        }
    }

    fn query(r0: u32, seed: u64) -> Query {
        EnvQuery {
            id: format!("t{r0}"),
            r0,
            seed,
        }
        .to_query()
    }

    fn op(env: &EnvBackend, text: &str) -> Operator {
        env.operator_set().by_text(text).unwrap().clone()
    }

    fn forced(env: &EnvBackend, q: &Query, seed: u64, ops: &[&str]) -> (bool, u64, usize) {
        let mut state = env.begin(q, seed).unwrap();
        let mut out = env.generate_step(&mut state).unwrap();
        let mut steps = 1;
        for text in ops {
            if out.done {
                break;
            }
            let (next, _) = env.apply_operator(&state, &op(env, text)).unwrap();
            state = next;
            out = env.generate_step(&mut state).unwrap();
            steps += 1;
        }
        (env.judge(&state, q), state.token_pos, steps)
    }

    #[test]
    fn all_statement_path_terminates_in_r0_operator_steps() {
        let env = EnvBackend::new(quiet_spec()).unwrap();
        let q = query(3, 9);
        let (correct, _, steps) = forced(&env, &q, 1, &["So", "So", "So", "So", "So"]);
        assert!(correct);
        // intro + exactly three statement steps
        assert_eq!(steps, 4);
    }

    #[test]
    fn certain_errors_without_reflection_end_incorrect() {
        let spec = EnvSpec {
            error_inject_prob: 1.0,
            initial_branch_quality: 0.0,
            fix_prob: 0.0,
            noise_sigma: 0.0,
            ..EnvSpec::default()
        };
        let env = EnvBackend::new(spec).unwrap();
        let q = query(3, 4);
        let (correct, _, _) = forced(&env, &q, 1, &["So", "So", "So"]);
        assert!(!correct);
    }

    #[test]
    fn mandatory_reflection_is_fixed_by_one_wait() {
        // Errors are certain on every non-terminal statement; one reflection
        // right before the summary clears the flag.
        let spec = EnvSpec {
            error_inject_prob: 1.0,
            initial_branch_quality: 0.0,
            branch_resample: vec![(0.0, 1.0)],
            fix_prob: 1.0,
            noise_sigma: 0.0,
            ..EnvSpec::default()
        };
        let env = EnvBackend::new(spec).unwrap();
        let q = query(2, 4);
        let (without, _, _) = forced(&env, &q, 1, &["So", "So"]);
        assert!(!without);
        let (with, _, _) = forced(&env, &q, 1, &["So", "Wait", "So"]);
        assert!(with);
    }

    #[test]
    fn noise_free_rollouts_are_deterministic() {
        let env = EnvBackend::new(quiet_spec()).unwrap();
        let q = query(4, 11);
        let a = forced(&env, &q, 7, &["So", "Then", "Wait", "So", "So", "So"]);
        let b = forced(&env, &q, 7, &["So", "Then", "Wait", "So", "So", "So"]);
        assert_eq!(a, b);
    }

    #[test]
    fn lookahead_is_pure_and_repeatable() {
        let env = EnvBackend::new(EnvSpec::default()).unwrap();
        let q = query(3, 2);
        let mut state = env.begin(&q, 5).unwrap();
        env.generate_step(&mut state).unwrap();
        let snapshot = state.clone();
        let (_, f1) = env.apply_operator(&state, &op(&env, "Wait")).unwrap();
        let (_, f2) = env.apply_operator(&state, &op(&env, "Wait")).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(state, snapshot);
        let (_, f3) = env.apply_operator(&state, &op(&env, "Then")).unwrap();
        assert_ne!(f1, f3);
    }

    #[test]
    fn lookahead_covers_all_operators_at_feature_dim() {
        let env = EnvBackend::new(EnvSpec::default()).unwrap();
        let q = query(3, 2);
        let mut state = env.begin(&q, 5).unwrap();
        env.generate_step(&mut state).unwrap();
        for o in env.operator_set().iter() {
            let (_, f) = env.apply_operator(&state, o).unwrap();
            assert_eq!(f.dim(), env.feature_dim());
        }
    }

    #[test]
    fn operator_outside_set_is_rejected() {
        let env = EnvBackend::new(EnvSpec::default()).unwrap();
        let q = query(2, 2);
        let mut state = env.begin(&q, 5).unwrap();
        env.generate_step(&mut state).unwrap();
        let bogus = Operator {
            id: 42,
            text: "Wait".into(),
        };
        assert!(env.apply_operator(&state, &bogus).is_err());
    }

    #[test]
    fn committed_step_begins_with_the_applied_operator() {
        let env = EnvBackend::new(EnvSpec::default()).unwrap();
        let q = query(3, 8);
        let mut state = env.begin(&q, 1).unwrap();
        env.generate_step(&mut state).unwrap();
        for o in env.operator_set().iter() {
            let (mut next, _) = env.apply_operator(&state, o).unwrap();
            let out = env.generate_step(&mut next).unwrap();
            assert_eq!(out.tokens[0], o.text);
        }
    }

    #[test]
    fn teacher_prefers_reflection_under_error_and_statement_otherwise() {
        let env = EnvBackend::new(EnvSpec::default()).unwrap();
        let q = query(4, 3);
        let mut state = env.begin(&q, 1).unwrap();
        env.generate_step(&mut state).unwrap();
        state.error_flag = true;
        let dist = env.teacher_policy(&state);
        let wait_id = env.operator_set().by_text("Wait").unwrap().id;
        assert_eq!(argmax(&dist), wait_id);
        state.error_flag = false;
        state.branch_quality = 0.9;
        let dist = env.teacher_policy(&state);
        let best = env.operator_set().get(argmax(&dist)).unwrap();
        assert_eq!(
            OperatorClass::of(&best.text),
            Some(OperatorClass::Statement)
        );
        assert!(
            dist.iter().all(|&p| p > 0.0),
            "teacher must keep full support"
        );
    }

    #[test]
    fn teacher_on_zero_latent_is_uniform() {
        let env = EnvBackend::new(EnvSpec::default()).unwrap();
        let z = vec![0.0; env.latent_dim()];
        let dist = softmax_stable(&env.teacher_logits_from_latent(&z));
        for p in dist {
            assert!((p - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_free_state_to_feature_map_is_injective_on_reachable_states() {
        let spec = EnvSpec {
            noise_sigma: 0.0,
            work_init_range: (2, 2),
            ..EnvSpec::default()
        };
        let env = EnvBackend::new(spec).unwrap();
        let q = query(2, 6);
        // Enumerate every state reachable within three interventions, keyed
        // by its full latent tuple; distinct states must separate in
        // feature space, identical states must coincide.
        type Key = (u32, bool, u64, u32, u64, usize);
        let mut by_state: std::collections::HashMap<Key, Vec<f64>> =
            std::collections::HashMap::new();
        let mut state0 = env.begin(&q, 3).unwrap();
        env.generate_step(&mut state0).unwrap();
        let mut frontier = vec![state0];
        for _ in 0..3 {
            let mut next_frontier = Vec::new();
            for state in &frontier {
                for o in env.operator_set().iter() {
                    let (mut committed, _) = env.apply_operator(state, o).unwrap();
                    let out = env.generate_step(&mut committed).unwrap();
                    let key: Key = (
                        committed.remaining_work,
                        committed.error_flag,
                        committed.branch_quality.to_bits(),
                        committed.steps_done,
                        committed.token_pos,
                        o.id,
                    );
                    if let Some(seen) = by_state.get(&key) {
                        assert_eq!(seen, &out.features.values, "same state, different features");
                    } else {
                        by_state.insert(key, out.features.values.clone());
                    }
                    if !out.done {
                        next_frontier.push(committed);
                    }
                }
            }
            frontier = next_frontier;
        }
        let entries: Vec<(&Key, &Vec<f64>)> = by_state.iter().collect();
        assert!(
            entries.len() > 50,
            "expected a rich reachable set, got {}",
            entries.len()
        );
        for i in 0..entries.len() {
            for j in (i + 1)..entries.len() {
                let d: f64 = entries[i]
                    .1
                    .iter()
                    .zip(entries[j].1)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    d > 1e-9,
                    "states {:?} and {:?} collide in feature space",
                    entries[i].0,
                    entries[j].0
                );
            }
        }
    }

    #[test]
    fn reflection_after_error_never_hurts_under_certain_fix() {
        // Paired common-random-number rollouts: inserting one reflection
        // right after the error-prone statement never lowers correctness.
        let spec = EnvSpec {
            fix_prob: 1.0,
            error_inject_prob: 0.6,
            noise_sigma: 0.0,
            ..EnvSpec::default()
        };
        let env = EnvBackend::new(spec).unwrap();
        let q = query(3, 21);
        for j in 0..64 {
            let (plain, _, _) = forced(&env, &q, j, &["So", "So", "So"]);
            let (fixed, _, _) = forced(&env, &q, j, &["So", "Wait", "So", "So"]);
            assert!(
                fixed || !plain,
                "rollout {j}: reflection lowered correctness"
            );
        }
    }

    #[test]
    fn replay_reproduces_stored_entry_features() {
        let env = EnvBackend::new(EnvSpec::default()).unwrap();
        let q = query(3, 13);
        // Natural rollout through the trait surface.
        let mut state = env.begin(&q, 2).unwrap();
        let mut steps = Vec::new();
        let mut entry: Option<FeatureVector> = None;
        loop {
            let out = env.generate_step(&mut state).unwrap();
            let mut step = crate::trace::ReasoningStep::new(
                out.tokens
                    .first()
                    .and_then(|t| env.operator_set().by_text(t))
                    .cloned(),
                out.tokens.clone(),
            );
            if steps.is_empty() {
                step.operator = None;
            }
            step.entry_features = entry.take();
            steps.push(step);
            if out.done || steps.len() > 40 {
                break;
            }
            entry = Some(out.features);
        }
        let total = ReasoningTrace::total_tokens_for(&steps);
        let trace = ReasoningTrace {
            query_id: q.id.clone(),
            steps,
            total_tokens: total,
            correct: env.judge(&state, &q),
            terminated_by: crate::trace::Termination::Answer,
            policy_tag: "original".into(),
            seed: env.effective_seed(&q, 2),
        };
        let replayed = env.replay_features(&trace).unwrap();
        assert_eq!(replayed.len() as u64, trace.total_tokens);
        // Entry features sit at the delimiter positions.
        let mut pos = 0usize;
        for (i, step) in trace.steps.iter().enumerate() {
            if i > 0 {
                let stored = step.entry_features.as_ref().unwrap();
                assert_eq!(
                    &replayed[pos], stored,
                    "delimiter feature mismatch before step {i}"
                );
                pos += 1;
            }
            pos += step.token_count;
        }
    }

    #[test]
    fn brute_force_prefers_pure_statements_on_a_clean_instance() {
        let spec = EnvSpec {
            error_inject_prob: 0.0,
            noise_sigma: 0.0,
            step_tokens: StepTokenRanges {
                intro: (16, 16),
                statement: (36, 36),
                reflection: (64, 64),
                divergence: (28, 28),
                setup: (12, 12),
            },
            ..EnvSpec::default()
        };
        let env = EnvBackend::new(spec).unwrap();
        let q = query(2, 30);
        let best = brute_force_optimal(&env, &q, 3, 4, 77).unwrap();
        assert_eq!(best.accuracy, 1.0);
        assert_eq!(best.sequence.len(), 3);
        for o in &best.sequence[..2] {
            assert_eq!(OperatorClass::of(&o.text), Some(OperatorClass::Statement));
        }
        // Two statements finish the work; lex tie-breaking picks id 0 twice
        // and the trailing never-reached slot stays at id 0.
        assert_eq!(best.sequence[0].text, "The");
        assert_eq!(best.sequence[1].text, "The");
        // intro 16 + 2 statements 72 + 2 delimiters
        assert_eq!(best.expected_length, 16.0 + 72.0 + 2.0);
    }

    #[test]
    fn brute_force_requires_exactly_one_reflection_when_errors_are_certain() {
        let spec = EnvSpec {
            error_inject_prob: 1.0,
            initial_branch_quality: 0.0,
            branch_resample: vec![(0.0, 1.0)],
            fix_prob: 1.0,
            noise_sigma: 0.0,
            step_tokens: StepTokenRanges {
                intro: (16, 16),
                statement: (36, 36),
                reflection: (64, 64),
                divergence: (28, 28),
                setup: (12, 12),
            },
            ..EnvSpec::default()
        };
        let env = EnvBackend::new(spec).unwrap();
        let q = query(2, 31);
        let best = brute_force_optimal(&env, &q, 3, 4, 78).unwrap();
        assert_eq!(best.accuracy, 1.0);
        let waits = best.sequence.iter().filter(|o| o.text == "Wait").count();
        assert_eq!(waits, 1, "best sequence {:?}", best.sequence);
    }

    #[test]
    fn brute_force_horizon_zero_judges_the_intro_alone() {
        let env = EnvBackend::new(quiet_spec()).unwrap();
        let q = query(2, 32);
        let best = brute_force_optimal(&env, &q, 0, 4, 79).unwrap();
        assert!(best.sequence.is_empty());
        assert_eq!(best.accuracy, 0.0);
    }

    #[test]
    fn brute_force_refuses_oversized_horizons() {
        let env = EnvBackend::new(EnvSpec::default()).unwrap();
        let q = query(2, 33);
        let err = brute_force_optimal(&env, &q, 12, 1, 80).unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
    }

    #[test]
    fn embedding_init_argmax_recovers_the_nearest_operator() {
        // Seeding the potential head with the environment's operator
        // embedding rows makes the forward argmax pick the operator whose
        // embedding a clean feature was built from (the rows are
        // orthonormal by construction here).
        let env = EnvBackend::new(EnvSpec {
            noise_sigma: 0.0,
            ..EnvSpec::default()
        })
        .unwrap();
        let rows = env.operator_embeddings();
        let head = crate::heads::init_potential_from_embeddings(&rows, "random8").unwrap();
        for (i, row) in rows.iter().enumerate() {
            let h = crate::trace::FeatureVector::new(row.clone());
            let (logits, _) = crate::heads::potential_forward(&head, &h).unwrap();
            let best = argmax(&logits);
            assert_eq!(best, i, "feature built from row {i} resolved to {best}");
        }
    }

    #[test]
    fn spec_validation_rejects_short_reflections_and_bad_distributions() {
        // Reflections no longer than statements.
        let mut spec = EnvSpec::default();
        spec.step_tokens.reflection = (8, 12);
        assert!(spec.validate().is_err());
        // Resample weights that do not sum to 1.
        let spec = EnvSpec {
            branch_resample: vec![(0.5, 0.4)],
            ..EnvSpec::default()
        };
        assert!(spec.validate().is_err());
        // Zero initial work.
        let spec = EnvSpec {
            work_init_range: (0, 3),
            ..EnvSpec::default()
        };
        assert!(spec.validate().is_err());
        // Operators with no environment class.
        let spec = EnvSpec {
            operator_set: OperatorSet::new("odd", &["Zorp"]).unwrap(),
            ..EnvSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn queries_are_generated_deterministically_within_range() {
        let spec = EnvSpec::default();
        let a = gen_queries(&spec, 20, 5);
        let b = gen_queries(&spec, 20, 5);
        assert_eq!(a, b);
        for q in &a {
            assert!(q.r0 >= spec.work_init_range.0 && q.r0 <= spec.work_init_range.1);
        }
        assert!(gen_queries(&spec, 0, 5).is_empty());
    }
}
