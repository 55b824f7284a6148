//! Decision-point detection on token streams and preceding-token statistics.
//!
//! Splitting is exact: a token is a boundary only if it equals the delimiter,
//! so joining the segments with the delimiter reconstructs the stream.
//! Decision-point detection additionally supports substring matching
//! (default on), because tokens that merely embed the delimiter — `").\n\n"`
//! and friends — mark a pause just as well as the bare delimiter.

use std::collections::BTreeMap;

use crate::trace::ReasoningTrace;

/// The step delimiter used throughout.
pub const DEFAULT_DELIMITER: &str = "\n\n";

/// A position where the next step's direction is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionPoint {
    /// 1-based index of the step about to begin (the first delimiter opens
    /// step 2).
    pub step_index: usize,
    /// Token offset immediately after the delimiter.
    pub token_offset: usize,
}

fn matches_delimiter(token: &str, delimiter: &str, substring: bool) -> bool {
    token == delimiter || (substring && token.contains(delimiter))
}

/// Find decision points with substring matching enabled.
pub fn find_decision_points(tokens: &[String], delimiter: &str) -> Vec<DecisionPoint> {
    find_decision_points_with(tokens, delimiter, true)
}

/// Find decision points; `substring` controls whether delimiter-bearing
/// tokens count as boundaries.
pub fn find_decision_points_with(
    tokens: &[String],
    delimiter: &str,
    substring: bool,
) -> Vec<DecisionPoint> {
    assert!(!delimiter.is_empty(), "delimiter must be non-empty");
    let mut points = Vec::new();
    let mut seen = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if matches_delimiter(tok, delimiter, substring) {
            seen += 1;
            points.push(DecisionPoint {
                step_index: seen + 1,
                token_offset: i + 1,
            });
        }
    }
    points
}

/// Split a stream on exact delimiter tokens. Joining the result with the
/// delimiter reconstructs the input; no segment contains the delimiter.
pub fn split_steps(tokens: &[String], delimiter: &str) -> Vec<Vec<String>> {
    let mut segments = vec![Vec::new()];
    for tok in tokens {
        if tok == delimiter {
            segments.push(Vec::new());
        } else {
            segments.last_mut().expect("never empty").push(tok.clone());
        }
    }
    segments
}

/// Inverse of [`split_steps`].
pub fn join_steps(segments: &[Vec<String>], delimiter: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            out.push(delimiter.to_string());
        }
        out.extend(seg.iter().cloned());
    }
    out
}

/// One rule for assigning a preceding token to a bucket label. Rules are
/// evaluated in order; the first match wins, so every token lands in
/// exactly one bucket when the list ends with [`BucketRule::Else`].
#[derive(Debug, Clone)]
pub enum BucketRule {
    /// Token contains the needle.
    Contains(String),
    /// Token equals the needle exactly.
    Equals(String),
    /// Catch-all.
    Else,
}

/// A labelled rule list.
#[derive(Debug, Clone)]
pub struct BucketRules {
    pub rules: Vec<(BucketRule, String)>,
}

impl BucketRules {
    /// The published grouping: delimiter-bearing tokens, a bare space,
    /// everything else.
    pub fn delimiter_space_other() -> Self {
        Self {
            rules: vec![
                (BucketRule::Contains("\n\n".into()), "x\\n\\n".into()),
                (BucketRule::Equals(" ".into()), " ".into()),
                (BucketRule::Else, "other".into()),
            ],
        }
    }

    pub fn bucket_of(&self, token: &str) -> &str {
        for (rule, label) in &self.rules {
            let hit = match rule {
                BucketRule::Contains(n) => token.contains(n.as_str()),
                BucketRule::Equals(n) => token == n,
                BucketRule::Else => true,
            };
            if hit {
                return label;
            }
        }
        "other"
    }
}

/// Distribution of preceding-token buckets for a keyword, with raw counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecedingDistribution {
    /// bucket label -> (count, probability)
    pub buckets: BTreeMap<String, (u64, f64)>,
    pub occurrences: u64,
}

fn alphabetic_core(token: &str) -> String {
    token
        .chars()
        .filter(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase()
}

/// Distribution over bucket labels of the token preceding each occurrence
/// of `keyword` in the given traces. Steps are rejoined with the delimiter,
/// so a keyword opening a step is preceded by the delimiter token. Matching
/// is case-insensitive on the token's alphabetic core; the first token of a
/// trace has no predecessor and is skipped. Empty distribution if the
/// keyword never occurs.
pub fn preceding_token_distribution(
    traces: &[ReasoningTrace],
    keyword: &str,
    rules: &BucketRules,
) -> PrecedingDistribution {
    let needle = keyword.to_lowercase();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut occurrences = 0u64;
    for trace in traces {
        let stream = join_steps(
            &trace
                .steps
                .iter()
                .map(|s| s.tokens.clone())
                .collect::<Vec<_>>(),
            DEFAULT_DELIMITER,
        );
        for i in 1..stream.len() {
            if alphabetic_core(&stream[i]) == needle {
                occurrences += 1;
                *counts
                    .entry(rules.bucket_of(&stream[i - 1]).to_string())
                    .or_default() += 1;
            }
        }
    }
    let mut buckets = BTreeMap::new();
    for (label, count) in counts {
        buckets.insert(label, (count, count as f64 / occurrences as f64));
    }
    PrecedingDistribution {
        buckets,
        occurrences,
    }
}

/// CSV rows `keyword,bucket,probability,count`.
pub fn distribution_csv(keyword: &str, dist: &PrecedingDistribution) -> String {
    let mut out = String::from("keyword,bucket,probability,count\n");
    for (bucket, (count, prob)) in &dist.buckets {
        out.push_str(&format!(
            "{keyword},{},{prob},{count}\n",
            bucket.replace('\n', "\\n")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ReasoningStep, ReasoningTrace, Termination};

    fn toks(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|t| t.to_string()).collect()
    }

    fn trace_from_steps(steps: Vec<Vec<&str>>) -> ReasoningTrace {
        let steps: Vec<ReasoningStep> = steps
            .into_iter()
            .map(|s| ReasoningStep::new(None, toks(&s)))
            .collect();
        let total = ReasoningTrace::total_tokens_for(&steps);
        ReasoningTrace {
            query_id: "q".into(),
            steps,
            total_tokens: total,
            correct: true,
            terminated_by: Termination::Answer,
            policy_tag: "fixture".into(),
            seed: 0,
        }
    }

    #[test]
    fn empty_stream_has_no_points() {
        assert!(find_decision_points(&[], "\n\n").is_empty());
    }

    #[test]
    fn points_follow_each_delimiter() {
        let stream = toks(&["a", "\n\n", "b", "\n\n", "c"]);
        let points = find_decision_points(&stream, "\n\n");
        assert_eq!(
            points,
            vec![
                DecisionPoint {
                    step_index: 2,
                    token_offset: 2
                },
                DecisionPoint {
                    step_index: 3,
                    token_offset: 4
                },
            ]
        );
    }

    #[test]
    fn no_delimiter_no_points() {
        assert!(find_decision_points(&toks(&["a", "b", "c"]), "\n\n").is_empty());
    }

    #[test]
    fn trailing_delimiter_yields_point_past_the_end() {
        let stream = toks(&["a", "\n\n"]);
        let points = find_decision_points(&stream, "\n\n");
        assert_eq!(
            points,
            vec![DecisionPoint {
                step_index: 2,
                token_offset: 2
            }]
        );
    }

    #[test]
    fn substring_matching_catches_embedded_delimiters() {
        let stream = toks(&["a", ").\n\n", "b"]);
        assert_eq!(find_decision_points(&stream, "\n\n").len(), 1);
        assert!(find_decision_points_with(&stream, "\n\n", false).is_empty());
    }

    #[test]
    fn split_basic() {
        assert_eq!(
            split_steps(&toks(&["a", "\n\n", "b"]), "\n\n"),
            vec![toks(&["a"]), toks(&["b"])]
        );
    }

    #[test]
    fn split_lone_delimiter_gives_two_empty_segments() {
        assert_eq!(
            split_steps(&toks(&["\n\n"]), "\n\n"),
            vec![Vec::<String>::new(), Vec::new()]
        );
    }

    #[test]
    fn split_single_step() {
        assert_eq!(split_steps(&toks(&["a"]), "\n\n"), vec![toks(&["a"])]);
    }

    #[test]
    fn points_count_is_segments_minus_one_without_trailing_delimiter() {
        let stream = toks(&["a", "\n\n", "b", "c", "\n\n", "d"]);
        let points = find_decision_points_with(&stream, "\n\n", false);
        let segs = split_steps(&stream, "\n\n");
        assert_eq!(points.len(), segs.len() - 1);
    }

    #[test]
    fn single_bucket_corpus() {
        let t = trace_from_steps(vec![vec!["so", "x"], vec!["alternatively", "y"]]);
        let d = preceding_token_distribution(
            &[t],
            "alternatively",
            &BucketRules::delimiter_space_other(),
        );
        assert_eq!(d.occurrences, 1);
        assert_eq!(d.buckets.get("x\\n\\n").unwrap().1, 1.0);
    }

    #[test]
    fn hand_counted_three_to_one_split() {
        // "wait" opens three steps (preceded by the delimiter) and once
        // follows a bare space inside a step.
        let t = trace_from_steps(vec![
            vec!["intro"],
            vec!["wait", "a"],
            vec!["Wait,", "b"],
            vec!["wait", "c"],
            vec!["x", " ", "wait", "d"],
        ]);
        let d = preceding_token_distribution(&[t], "wait", &BucketRules::delimiter_space_other());
        assert_eq!(d.occurrences, 4);
        assert_eq!(d.buckets.get("x\\n\\n").unwrap(), &(3, 0.75));
        assert_eq!(d.buckets.get(" ").unwrap(), &(1, 0.25));
    }

    #[test]
    fn absent_keyword_gives_empty_distribution() {
        let t = trace_from_steps(vec![vec!["a"], vec!["b"]]);
        let d = preceding_token_distribution(&[t], "hmm", &BucketRules::delimiter_space_other());
        assert_eq!(d, PrecedingDistribution::default());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_then_join_reconstructs_the_stream(
                stream in proptest::collection::vec(
                    prop_oneof![3 => "[a-z]{1,5}", 1 => Just("\n\n".to_string())],
                    0..24,
                ),
            ) {
                let segments = split_steps(&stream, "\n\n");
                prop_assert!(segments.iter().all(|s| !s.contains(&"\n\n".to_string())));
                prop_assert_eq!(join_steps(&segments, "\n\n"), stream);
            }

            #[test]
            fn point_count_is_segment_count_minus_one(
                stream in proptest::collection::vec(
                    prop_oneof![3 => "[a-z]{1,5}", 1 => Just("\n\n".to_string())],
                    0..24,
                ),
            ) {
                prop_assume!(stream.last().map(String::as_str) != Some("\n\n"));
                let points = find_decision_points_with(&stream, "\n\n", false);
                let segments = split_steps(&stream, "\n\n");
                prop_assert_eq!(points.len(), segments.len() - 1);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_when_keyword_occurs() {
        let t = trace_from_steps(vec![
            vec!["a", "then", "b"],
            vec!["then", "c"],
            vec!["d", " ", "then"],
        ]);
        let d = preceding_token_distribution(&[t], "then", &BucketRules::delimiter_space_other());
        let total: f64 = d.buckets.values().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
