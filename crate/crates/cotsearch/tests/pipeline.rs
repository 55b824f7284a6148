//! Cross-module checks: every rollout policy produces traces that validate
//! clean, progress labels line up with token positions, and the trained
//! progress head orders lookahead branches by remaining work.

use cotsearch::backend::{EnvBackend, EnvQuery, EnvSpec, OperatorClass};
use cotsearch::explorer::random_rollout;
use cotsearch::heads::{
    build_progress_dataset, progress_forward, train_progress, ProgressHead, TrainConfig,
};
use cotsearch::metrics::operator_frequency;
use cotsearch::search::{
    lookahead, rollout_natural, rollout_seed, run_hybrid_guidance, run_search, SearchConfig,
};
use cotsearch::trace::{validate_trace, OperatorSet, ReasoningStep, ReasoningTrace, Termination};
use cotsearch::Backend;

fn env() -> EnvBackend {
    EnvBackend::new(EnvSpec::default()).unwrap()
}

fn query(id: &str, r0: u32, seed: u64) -> cotsearch::Query {
    EnvQuery {
        id: id.into(),
        r0,
        seed,
    }
    .to_query()
}

#[test]
fn every_policy_produces_validating_traces() {
    let env = env();
    let cfg = SearchConfig {
        seed: 11,
        ..SearchConfig::default()
    };
    let pot =
        cotsearch::heads::init_potential_from_embeddings(&env.operator_embeddings(), "random8")
            .unwrap();
    let prog = ProgressHead::zeros(env.feature_dim());
    let limits = cfg.budget_limits();
    for i in 0..12u64 {
        let q = query(&format!("v{i}"), 2 + (i % 4) as u32, i);
        let mut traces = vec![
            run_search(&q, &env, &pot, &prog, &cfg).unwrap(),
            random_rollout(&q, &env, &cfg, rollout_seed(cfg.seed, &q.id, 0)).unwrap(),
            rollout_natural(&q, &env, &cfg, 0).unwrap(),
        ];
        let planner = |s: &cotsearch::backend::EnvState| env.teacher_policy(s);
        traces.push(run_hybrid_guidance(&q, &env, planner, &cfg, 0).unwrap().0);
        for t in traces {
            let violations = validate_trace(&t, &limits, &cfg.operator_set);
            assert!(
                violations.is_empty(),
                "{} trace: {violations:?}",
                t.policy_tag
            );
        }
    }
}

#[test]
fn progress_labels_are_token_positions_over_length() {
    let env = env();
    // Hand-built complete trace: a 2-token intro, then a 1-token statement
    // that exhausts one unit of work; with the delimiter that is L = 4.
    let steps = vec![
        ReasoningStep::new(None, vec!["ok".into(), "go".into()]),
        ReasoningStep::new(env.operator_set().by_text("So").cloned(), vec!["So".into()]),
    ];
    let total = ReasoningTrace::total_tokens_for(&steps);
    assert_eq!(total, 4);
    let trace = ReasoningTrace {
        query_id: "tiny".into(),
        steps,
        total_tokens: total,
        correct: true,
        terminated_by: Termination::Answer,
        policy_tag: "fixture".into(),
        seed: 5,
    };
    let (samples, skipped) = build_progress_dataset(&[trace], &env).unwrap();
    assert_eq!(skipped, 0);
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    assert_eq!(labels, vec![0.25, 0.5, 0.75, 1.0]);

    // Incomplete traces are skipped with a count; empty input is empty.
    let (none, _) = build_progress_dataset(&[], &env).unwrap();
    assert!(none.is_empty());
    let mut cut = ReasoningTrace {
        query_id: "cut".into(),
        steps: vec![ReasoningStep::new(None, vec!["x".into()])],
        total_tokens: 1,
        correct: false,
        terminated_by: Termination::StepBudget,
        policy_tag: "fixture".into(),
        seed: 1,
    };
    cut.total_tokens = 1;
    let (samples, skipped) = build_progress_dataset(&[cut], &env).unwrap();
    assert!(samples.is_empty());
    assert_eq!(skipped, 1);

    // Final token of any complete rollout labels exactly 1.0.
    let cfg = SearchConfig::default();
    let t = rollout_natural(&query("full", 3, 9), &env, &cfg, 0).unwrap();
    if t.terminated_by == Termination::Answer {
        let (samples, _) = build_progress_dataset(&[t], &env).unwrap();
        assert_eq!(samples.last().unwrap().label, 1.0);
    }
}

#[test]
fn trained_progress_head_ranks_statement_above_reflection() {
    // On noise-free features the trained head must order lookahead branches
    // by remaining work: the statement branch (one unit closer to done)
    // scores strictly above the reflection branch at every decision point.
    let env = EnvBackend::new(EnvSpec {
        noise_sigma: 0.0,
        ..EnvSpec::default()
    })
    .unwrap();
    let cfg = SearchConfig {
        seed: 21,
        ..SearchConfig::default()
    };
    let traces: Vec<ReasoningTrace> = (0..120)
        .map(|i| {
            rollout_natural(
                &query(&format!("p{i}"), 2 + (i % 5) as u32, i),
                &env,
                &cfg,
                0,
            )
            .unwrap()
        })
        .filter(|t| t.terminated_by == Termination::Answer)
        .collect();
    let (data, _) = build_progress_dataset(&traces, &env).unwrap();
    let train_cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 25,
        batch_size: 64,
        seed: 5,
        l2: 0.0,
    };
    let (head, _) = train_progress(&data, &train_cfg).unwrap();

    let then = env.operator_set().by_text("Then").unwrap().clone();
    let wait = env.operator_set().by_text("Wait").unwrap().clone();
    let mut checked = 0;
    for i in 0..10u64 {
        let q = query(&format!("o{i}"), 3 + (i % 3) as u32, 40 + i);
        let mut state = env.begin(&q, 1).unwrap();
        let mut out = env.generate_step(&mut state).unwrap();
        while !out.done {
            let v_then = progress_forward(&head, &lookahead(&env, &state, &then).unwrap()).unwrap();
            let v_wait = progress_forward(&head, &lookahead(&env, &state, &wait).unwrap()).unwrap();
            assert!(
                v_then > v_wait,
                "statement branch valued {v_then} vs reflection {v_wait} at r={}",
                state.remaining_work
            );
            checked += 1;
            let (next, _) = env.apply_operator(&state, &then).unwrap();
            state = next;
            out = env.generate_step(&mut state).unwrap();
        }
    }
    assert!(checked >= 20, "covered {checked} decision points");
}

#[test]
fn uniform_rollouts_have_uniform_operator_frequency() {
    let env = env();
    let cfg = SearchConfig::default();
    let mut traces = Vec::new();
    let mut decisions = 0;
    let mut i = 0u64;
    while decisions < 10_000 {
        let q = query(&format!("f{i}"), 6, i);
        let t = random_rollout(&q, &env, &cfg, rollout_seed(3, &q.id, 0)).unwrap();
        decisions += t.decision_count();
        traces.push(t);
        i += 1;
    }
    let rows = operator_frequency(&traces);
    assert_eq!(rows.len(), 8);
    let total: f64 = rows.iter().map(|r| r.percent).sum();
    assert!((total - 100.0).abs() < 1e-9);
    for r in &rows {
        assert!(
            (r.percent - 12.5).abs() < 1.5,
            "{} at {:.2}%",
            r.operator,
            r.percent
        );
    }
}

#[test]
fn hybrid_guiding_fraction_recomputes_from_token_counts() {
    let env = env();
    let cfg = SearchConfig {
        seed: 33,
        ..SearchConfig::default()
    };
    let planner = |s: &cotsearch::backend::EnvState| env.teacher_policy(s);
    let q = query("h", 4, 17);
    let (trace, fraction) = run_hybrid_guidance(&q, &env, planner, &cfg, 0).unwrap();
    let forced = trace.steps.len() as f64 - 1.0;
    assert!((fraction - forced / trace.total_tokens as f64).abs() < 1e-12);
}

#[test]
fn operator_classes_partition_both_builtin_sets() {
    for set in [OperatorSet::random8(), OperatorSet::full()] {
        for op in set.iter() {
            assert!(
                OperatorClass::of(&op.text).is_some(),
                "{:?} unclassified",
                op.text
            );
        }
    }
}
