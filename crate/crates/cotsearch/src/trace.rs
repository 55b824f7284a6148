//! Core domain types: operators, queries, steps, traces, feature vectors,
//! plus trace validation and JSONL persistence.
//!
//! A [`ReasoningTrace`] is the unit of persistence and analysis everywhere
//! else in the crate. Traces are immutable once built; sharing across
//! threads is safe.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One thinking token from the action space, with its stable id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operator {
    pub id: usize,
    pub text: String,
}

/// The finite action space of thinking tokens. Ids are exactly the
/// positions `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSet {
    pub name: String,
    operators: Vec<Operator>,
}

/// The eight connective tokens used for uniform random rollouts.
pub const RANDOM8_TOKENS: [&str; 8] = [
    "The",
    "Thus",
    "Therefore",
    "So",
    "Then",
    "Let",
    "Wait",
    "Alternatively",
];

/// The comprehensive sixteen-token set, including structural markers.
pub const FULL_TOKENS: [&str; 16] = [
    "The",
    "Thus",
    "Therefore",
    "So",
    "Then",
    "Let",
    "Wait",
    "Alternatively",
    "Now",
    "I",
    "First",
    "Option",
    "**",
    "-",
    "\\[",
    "\\",
];

impl OperatorSet {
    /// Build a set from token texts; ids follow list order.
    pub fn new(name: impl Into<String>, tokens: &[&str]) -> Result<Self> {
        Self::from_tokens(name, tokens.iter().map(|t| t.to_string()).collect())
    }

    pub fn from_tokens(name: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let name = name.into();
        if tokens.is_empty() {
            return Err(Error::Data("operator set must not be empty".into()));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("operator {i} has empty text")));
            }
            if tokens[..i].contains(t) {
                return Err(Error::Data(format!("duplicate operator text {t:?}")));
            }
        }
        let operators = tokens
            .into_iter()
            .enumerate()
            .map(|(id, text)| Operator { id, text })
            .collect();
        Ok(Self { name, operators })
    }

    /// The restricted 8-token connective set.
    pub fn random8() -> Self {
        Self::new("random8", &RANDOM8_TOKENS).expect("builtin set is valid")
    }

    /// The full 16-token set.
    pub fn full() -> Self {
        Self::new("full", &FULL_TOKENS).expect("builtin set is valid")
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    pub fn get(&self, id: usize) -> Option<&Operator> {
        self.operators.get(id)
    }

    pub fn by_text(&self, text: &str) -> Option<&Operator> {
        self.operators.iter().find(|o| o.text == text)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Operator> {
        self.operators.iter()
    }
}

/// Wire form: `{name, tokens}`. Ids are implicit in token order.
#[derive(Serialize, Deserialize)]
struct OperatorSetWire {
    name: String,
    tokens: Vec<String>,
}

impl Serialize for OperatorSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        OperatorSetWire {
            name: self.name.clone(),
            tokens: self.operators.iter().map(|o| o.text.clone()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for OperatorSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = OperatorSetWire::deserialize(d)?;
        OperatorSet::from_tokens(wire.name, wire.tokens).map_err(serde::de::Error::custom)
    }
}

/// An input problem. `prompt` tokens are opaque strings supplied by the
/// backend; `answer_key` is only interpreted by the backend's judge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub prompt: Vec<String>,
    pub answer_key: String,
}

/// A dense feature vector observed from the backend (the stand-in for a
/// hidden state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One reasoning step. The first step of a trace carries no operator;
/// interventions start at the first delimiter.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningStep {
    pub operator: Option<Operator>,
    /// Step tokens, excluding the trailing delimiter.
    pub tokens: Vec<String>,
    pub token_count: usize,
    /// Feature vector at the decision point preceding this step.
    pub entry_features: Option<FeatureVector>,
    /// Feature vector after appending the chosen operator (the lookahead
    /// state the step was scored with).
    pub lookahead_features: Option<FeatureVector>,
}

impl ReasoningStep {
    pub fn new(operator: Option<Operator>, tokens: Vec<String>) -> Self {
        let token_count = tokens.len();
        Self {
            operator,
            tokens,
            token_count,
            entry_features: None,
            lookahead_features: None,
        }
    }
}

/// How a rollout ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    StepBudget,
    TokenBudget,
}

/// A complete reasoning path for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrace {
    pub query_id: String,
    pub steps: Vec<ReasoningStep>,
    /// Sum of step token counts plus one delimiter between consecutive steps.
    pub total_tokens: u64,
    pub correct: bool,
    pub terminated_by: Termination,
    pub policy_tag: String,
    pub seed: u64,
}

impl ReasoningTrace {
    /// Delimiters count one token each; they sit between consecutive steps.
    pub fn total_tokens_for(steps: &[ReasoningStep]) -> u64 {
        let body: u64 = steps.iter().map(|s| s.token_count as u64).sum();
        body + steps.len().saturating_sub(1) as u64
    }

    /// The operator sequence of steps 2..T (the reasoning architecture).
    pub fn architecture(&self) -> Vec<&Operator> {
        self.steps
            .iter()
            .filter_map(|s| s.operator.as_ref())
            .collect()
    }

    /// Number of decision points the trace passed through.
    pub fn decision_count(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }
}

/// Budgets a trace is validated against. A [`crate::search::SearchConfig`]
/// converts into this.
#[derive(Debug, Clone, Copy)]
pub struct BudgetLimits {
    pub step_budget: usize,
    pub token_budget: u64,
}

/// Check every structural invariant of a trace against the given budgets.
/// Violations are data, not failures: the list is empty iff the trace is
/// well formed.
pub fn validate_trace(
    trace: &ReasoningTrace,
    limits: &BudgetLimits,
    set: &OperatorSet,
) -> Vec<String> {
    let mut v = Vec::new();
    if trace.steps.is_empty() {
        v.push("steps empty".to_string());
        return v;
    }
    if trace.steps.len() > limits.step_budget {
        v.push("step budget exceeded".to_string());
    }
    if trace.steps[0].operator.is_some() {
        v.push("first step carries an operator".to_string());
    }
    for (i, step) in trace.steps.iter().enumerate() {
        if step.token_count != step.tokens.len() {
            v.push(format!(
                "step {i}: token_count {} != tokens len {}",
                step.token_count,
                step.tokens.len()
            ));
        }
        if let Some(op) = &step.operator {
            match set.get(op.id) {
                None => v.push(format!(
                    "step {i}: operator id {} outside set {:?}",
                    op.id, set.name
                )),
                Some(known) if known.text != op.text => v.push(format!(
                    "step {i}: operator text {:?} does not match set entry {:?}",
                    op.text, known.text
                )),
                _ => {}
            }
            if step.tokens.first().map(String::as_str) != Some(op.text.as_str()) {
                v.push(format!(
                    "step {i}: tokens do not begin with operator text {:?}",
                    op.text
                ));
            }
        }
        for (name, f) in [
            ("entry", &step.entry_features),
            ("lookahead", &step.lookahead_features),
        ] {
            if let Some(f) = f {
                if !f.is_finite() {
                    v.push(format!("step {i}: non-finite {name} features"));
                }
            }
        }
    }
    let body: u64 = trace.steps.iter().map(|s| s.token_count as u64).sum();
    if trace.total_tokens < body {
        v.push("total_tokens below sum of step token counts".to_string());
    }
    match trace.terminated_by {
        Termination::StepBudget => {
            if trace.steps.len() != limits.step_budget {
                v.push("terminated by step budget but step count differs from budget".to_string());
            }
        }
        Termination::TokenBudget => {
            if trace.total_tokens < limits.token_budget {
                v.push("terminated by token budget but total below budget".to_string());
            }
        }
        Termination::Answer => {}
    }
    // Budget must have been respected before the final step began.
    if trace.steps.len() > 1 {
        let prefix = ReasoningTrace::total_tokens_for(&trace.steps[..trace.steps.len() - 1]);
        if prefix >= limits.token_budget {
            v.push("token budget exceeded before final step".to_string());
        }
    }
    v
}

#[derive(Serialize, Deserialize)]
struct StepWire {
    operator_id: Option<usize>,
    tokens: Vec<String>,
    entry_features: Option<Vec<f64>>,
    lookahead_features: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TraceWire {
    query_id: String,
    steps: Vec<StepWire>,
    total_tokens: u64,
    correct: bool,
    terminated_by: Termination,
    policy_tag: String,
    seed: u64,
}

fn to_wire(t: &ReasoningTrace) -> TraceWire {
    TraceWire {
        query_id: t.query_id.clone(),
        steps: t
            .steps
            .iter()
            .map(|s| StepWire {
                operator_id: s.operator.as_ref().map(|o| o.id),
                tokens: s.tokens.clone(),
                entry_features: s.entry_features.as_ref().map(|f| f.values.clone()),
                lookahead_features: s.lookahead_features.as_ref().map(|f| f.values.clone()),
            })
            .collect(),
        total_tokens: t.total_tokens,
        correct: t.correct,
        terminated_by: t.terminated_by,
        policy_tag: t.policy_tag.clone(),
        seed: t.seed,
    }
}

fn from_wire(w: TraceWire, set: &OperatorSet) -> Result<ReasoningTrace> {
    let mut steps = Vec::with_capacity(w.steps.len());
    for s in w.steps {
        let operator = match s.operator_id {
            None => None,
            Some(id) => Some(set.get(id).cloned().ok_or(Error::UnknownOperator { id })?),
        };
        let token_count = s.tokens.len();
        steps.push(ReasoningStep {
            operator,
            tokens: s.tokens,
            token_count,
            entry_features: s.entry_features.map(FeatureVector::new),
            lookahead_features: s.lookahead_features.map(FeatureVector::new),
        });
    }
    Ok(ReasoningTrace {
        query_id: w.query_id,
        steps,
        total_tokens: w.total_tokens,
        correct: w.correct,
        terminated_by: w.terminated_by,
        policy_tag: w.policy_tag,
        seed: w.seed,
    })
}

/// Serialize one trace to its JSONL line.
pub fn trace_to_json(t: &ReasoningTrace) -> Result<String> {
    Ok(serde_json::to_string(&to_wire(t))?)
}

/// Parse one JSONL line, resolving operator ids against `set`.
pub fn trace_from_json(line: &str, set: &OperatorSet) -> Result<ReasoningTrace> {
    let wire: TraceWire = serde_json::from_str(line)?;
    from_wire(wire, set)
}

/// Write traces as JSONL, one per line. Returns the count written.
pub fn write_traces(path: &Path, traces: &[ReasoningTrace]) -> Result<usize> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in traces {
        writeln!(w, "{}", trace_to_json(t)?)?;
    }
    w.flush()?;
    Ok(traces.len())
}

/// Read traces from JSONL. Errors name the offending 1-based line number.
pub fn read_traces(path: &Path, set: &OperatorSet) -> Result<Vec<ReasoningTrace>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(trace_from_json(&line, set).map_err(|e| Error::Line {
            line: idx + 1,
            source: Box::new(e),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits() -> BudgetLimits {
        BudgetLimits {
            step_budget: 50,
            token_budget: 4096,
        }
    }

    fn step(op: Option<&Operator>, tokens: &[&str]) -> ReasoningStep {
        ReasoningStep::new(op.cloned(), tokens.iter().map(|t| t.to_string()).collect())
    }

    fn sample_trace(set: &OperatorSet) -> ReasoningTrace {
        let wait = set.by_text("Wait").unwrap();
        let then = set.by_text("Then").unwrap();
        let steps = vec![
            step(None, &["okay", "reading"]),
            step(Some(then), &["Then", "compute"]),
            step(Some(wait), &["Wait", "check", "again"]),
        ];
        let total = ReasoningTrace::total_tokens_for(&steps);
        ReasoningTrace {
            query_id: "q0".into(),
            steps,
            total_tokens: total,
            correct: true,
            terminated_by: Termination::Answer,
            policy_tag: "ncots".into(),
            seed: 17,
        }
    }

    #[test]
    fn builtin_sets_match_published_vocabularies() {
        let r8 = OperatorSet::random8();
        assert_eq!(r8.len(), 8);
        assert_eq!(r8.get(6).unwrap().text, "Wait");
        let full = OperatorSet::full();
        assert_eq!(full.len(), 16);
        assert_eq!(full.get(15).unwrap().text, "\\");
        // The restricted set is a prefix of the full set.
        for (a, b) in r8.iter().zip(full.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_trace_reports_steps_empty() {
        let set = OperatorSet::random8();
        let mut t = sample_trace(&set);
        t.steps.clear();
        assert_eq!(
            validate_trace(&t, &limits(), &set),
            vec!["steps empty".to_string()]
        );
    }

    #[test]
    fn well_formed_trace_validates_clean() {
        let set = OperatorSet::random8();
        let t = sample_trace(&set);
        assert!(validate_trace(&t, &limits(), &set).is_empty());
    }

    #[test]
    fn step_budget_violation_is_reported() {
        let set = OperatorSet::random8();
        let then = set.by_text("Then").cloned().unwrap();
        let mut steps = vec![step(None, &["intro"])];
        for _ in 0..50 {
            steps.push(step(Some(&then), &["Then", "x"]));
        }
        assert_eq!(steps.len(), 51);
        let total = ReasoningTrace::total_tokens_for(&steps);
        let t = ReasoningTrace {
            query_id: "q".into(),
            steps,
            total_tokens: total,
            correct: false,
            terminated_by: Termination::Answer,
            policy_tag: "test".into(),
            seed: 0,
        };
        let violations = validate_trace(&t, &limits(), &set);
        assert!(
            violations.contains(&"step budget exceeded".to_string()),
            "{violations:?}"
        );
    }

    #[test]
    fn roundtrip_two_traces() {
        let set = OperatorSet::random8();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.jsonl");
        let mut a = sample_trace(&set);
        a.steps[1].entry_features = Some(FeatureVector::new(vec![0.25, -1.5e-17, 3.0]));
        a.steps[1].lookahead_features = Some(FeatureVector::new(vec![f64::MIN_POSITIVE, 1.0]));
        let b = ReasoningTrace {
            query_id: "q1".into(),
            correct: false,
            ..sample_trace(&set)
        };
        assert_eq!(write_traces(&path, &[a.clone(), b.clone()]).unwrap(), 2);
        let back = read_traces(&path, &set).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn empty_file_reads_empty() {
        let set = OperatorSet::random8();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_traces(&path, &set).unwrap().is_empty());
    }

    #[test]
    fn corrupt_line_errors_with_line_number() {
        let set = OperatorSet::random8();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = trace_to_json(&sample_trace(&set)).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n{good}\n")).unwrap();
        let err = read_traces(&path, &set).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_operator_id_names_the_id() {
        let set = OperatorSet::random8();
        let line = r#"{"query_id":"q","steps":[{"operator_id":null,"tokens":["a"],"entry_features":null,"lookahead_features":null},{"operator_id":99,"tokens":["x"],"entry_features":null,"lookahead_features":null}],"total_tokens":3,"correct":false,"terminated_by":"answer","policy_tag":"t","seed":0}"#;
        let err = trace_from_json(line, &set).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_step(set: &'static OperatorSet) -> impl Strategy<Value = ReasoningStep> {
            let ops = proptest::option::of(0..set.len());
            (
                ops,
                proptest::collection::vec("[a-z]{1,6}", 0..8),
                proptest::option::of(proptest::collection::vec(
                    prop_oneof![
                        any::<f64>().prop_filter("finite", |v| v.is_finite()),
                        Just(0.0)
                    ],
                    1..4,
                )),
            )
                .prop_map(|(op, mut tokens, feats)| {
                    let operator = op.map(|id| set.get(id).unwrap().clone());
                    if let Some(o) = &operator {
                        tokens.insert(0, o.text.clone());
                    }
                    let mut step = ReasoningStep::new(operator, tokens);
                    step.entry_features = feats.map(FeatureVector::new);
                    step
                })
        }

        fn random8() -> &'static OperatorSet {
            static SET: std::sync::OnceLock<OperatorSet> = std::sync::OnceLock::new();
            SET.get_or_init(OperatorSet::random8)
        }

        proptest! {
            #[test]
            fn jsonl_roundtrip_is_identity(
                first_tokens in proptest::collection::vec("[a-z]{1,6}", 1..6),
                mut steps in proptest::collection::vec(arb_step(random8()), 0..6),
                correct in any::<bool>(),
                seed in any::<u64>(),
            ) {
                let mut all = vec![ReasoningStep::new(None, first_tokens)];
                all.append(&mut steps);
                let total = ReasoningTrace::total_tokens_for(&all);
                let trace = ReasoningTrace {
                    query_id: "prop".into(),
                    steps: all,
                    total_tokens: total,
                    correct,
                    terminated_by: Termination::Answer,
                    policy_tag: "prop".into(),
                    seed,
                };
                let line = trace_to_json(&trace).unwrap();
                let back = trace_from_json(&line, random8()).unwrap();
                prop_assert_eq!(back, trace);
            }
        }
    }

    #[test]
    fn operator_set_roundtrips_as_name_tokens() {
        let set = OperatorSet::random8();
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.contains("\"name\":\"random8\""));
        assert!(json.contains("\"tokens\""));
        let back: OperatorSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }
}
