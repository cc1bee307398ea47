use std::sync::Arc;

use graphsolve::collect::{run_collection, ProblemRecord, Solver};
use graphsolve::gateway::{AgentRole, Gateway, MockBackend, MockRule};
use graphsolve::knowledge::{ExperienceEntry, HashingEmbedder, KnowledgeBase, RetrievalKind};
use graphsolve::normalize::RawQuestion;
use graphsolve::orchestrator::{Pipeline, PipelineConfig, RetrievalPolicy, SolveStatus};
use graphsolve::solving::{ExecutionOutcome, Executor, InterpreterExecutor, StubExecutor};
use serde_json::json;

const HAMILTON_QUESTION: &str = "Determine whether or not there is a Hamiltonian path in an undirected graph. \
In an undirected graph, (i,j) means that node i and node j are connected with an undirected edge. \
The nodes are numbered from 0 to 6, and the edges are: (0,3) (0,1) (1,6) (2,4) (3,5) (3,6) (4,5)";

const HAMILTON_CODE: &str = "```python
from itertools import permutations
edges = [(0, 3), (0, 1), (1, 6), (2, 4), (3, 5), (3, 6), (4, 5)]
adj = {frozenset(e) for e in edges}
for p in permutations(range(7)):
    if all(frozenset((p[i], p[i + 1])) in adj for i in range(6)):
        print(', '.join(map(str, p)))
        break
```";

fn pipeline_with(rules: Vec<MockRule>, executor: Arc<dyn Executor>, kb: KnowledgeBase) -> Pipeline {
    let gateway = Gateway::new(Arc::new(MockBackend::new(rules)));
    Pipeline::new(PipelineConfig::default(), gateway, kb, executor).unwrap()
}

fn empty_kb() -> KnowledgeBase {
    KnowledgeBase::new(Arc::new(HashingEmbedder::new(128)))
}

#[tokio::test]
async fn hamiltonian_end_to_end_with_live_sandbox() {
    let normalized = json!({
        "Reformatted_Problem": "Determine whether there is a Hamiltonian path in the undirected graph and give the path.",
        "Graph_Type": "undirected",
        "Input_Data": "(0,3) (0,1) (1,6) (2,4) (3,5) (3,6) (4,5)",
        "Output_Format": "Yes. The path can be: 0, 1, 2, 3, 4, 5, 6."
    });
    let fixed = "Yes. The path can be: 0, 1, 6, 3, 5, 4, 2.";
    let rules = vec![
        MockRule::new(
            format!("content to be reviewed): {fixed}"),
            json!({"need_adjustment": false, "output": fixed}).to_string(),
        ),
        MockRule::new(
            "content to be reviewed): 0, 1, 6, 3, 5, 4, 2",
            json!({"need_adjustment": true, "output": fixed}).to_string(),
        ),
        MockRule::new("write Python codes", HAMILTON_CODE),
        MockRule::new("requirement analyst", normalized.to_string()),
    ];
    let p = pipeline_with(rules, Arc::new(InterpreterExecutor::python(20.0)), empty_kb());
    let (answer, trace) = p.solve(&RawQuestion::new(HAMILTON_QUESTION)).await;
    assert_eq!(answer.text, fixed);
    assert_eq!(answer.status, SolveStatus::SolvedByCode);
    assert_eq!(trace.attempts[0].result.as_deref(), Some("0, 1, 6, 3, 5, 4, 2"));
    assert_eq!(trace.call_count(AgentRole::Answer), 2);
}

fn item_rules() -> Vec<MockRule> {
    vec![
        MockRule::new("output format reviewer", r#"{"need_adjustment": false, "output": ""}"#),
        MockRule::new("write Python codes", "```python\n# ok\nprint(1)\n```"),
        MockRule::new("Here is the task: broken", "I cannot help with that."),
        MockRule::new(
            "requirement analyst",
            r#"{"reformatted_problem": "count", "graph_type": "undirected", "input_data": "0-1", "output_format": "integer"}"#,
        ),
    ]
}

fn ok_executor() -> Arc<dyn Executor> {
    Arc::new(StubExecutor::new().on("# ok", ExecutionOutcome::success("1\n")))
}

#[tokio::test]
async fn batch_isolates_failures_and_records_every_call() {
    let p = pipeline_with(item_rules(), ok_executor(), empty_kb());
    let items: Vec<RawQuestion> = ["a", "b", "broken", "d", "e"]
        .iter()
        .map(|q| RawQuestion::new(*q).with_id(*q))
        .collect();
    let out = p.solve_batch(&items, 2).await;
    let statuses: Vec<SolveStatus> = out.iter().map(|(a, _)| a.status).collect();
    use SolveStatus::*;
    assert_eq!(statuses, [SolvedByCode, SolvedByCode, Failed, SolvedByCode, SolvedByCode]);
    assert_eq!(out[2].1.agent_sequence(), [AgentRole::Question, AgentRole::Question]);

    let traced: usize = out
        .iter()
        .flat_map(|(_, t)| &t.stages)
        .map(|s| s.calls.len())
        .sum();
    let snapshot = p.gateway().ledger.snapshot();
    assert_eq!(snapshot.calls as usize, traced);
    let trace_tokens: u64 = out.iter().map(|(_, t)| t.total_usage.total()).sum();
    assert_eq!(snapshot.total.total(), trace_tokens);
}

#[tokio::test]
async fn sequential_batch_has_disjoint_stage_windows() {
    let p = pipeline_with(item_rules(), ok_executor(), empty_kb());
    let items = [RawQuestion::new("x").with_id("1"), RawQuestion::new("y").with_id("2")];
    let out = p.solve_batch(&items, 1).await;
    let first_end = out[0].1.stages.iter().map(|s| s.finished_at_us).max().unwrap();
    let second_start = out[1].1.stages.iter().map(|s| s.started_at_us).min().unwrap();
    assert!(first_end <= second_start);
    for (_, t) in &out {
        for w in t.stages.windows(2) {
            assert!(w[0].finished_at_us <= w[1].started_at_us);
        }
    }
}

#[tokio::test]
async fn repeated_runs_are_identical_without_timestamps() {
    let mut traces = Vec::new();
    for _ in 0..2 {
        let p = pipeline_with(item_rules(), ok_executor(), empty_kb());
        let (_, t) = p.solve(&RawQuestion::new("q").with_id("q")).await;
        traces.push(serde_json::to_string(&t.without_timestamps()).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[tokio::test]
async fn file_input_is_staged() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("edges.txt");
    std::fs::write(&graph, "0 1\n1 2\n2 3\n").unwrap();
    let normalized = json!({
        "reformatted_problem": "count edges",
        "graph_type": "undirected",
        "input_data": graph.display().to_string(),
        "output_format": "None"
    });
    let rules = vec![
        MockRule::new(
            "write Python codes",
            "```python\nprint(sum(1 for _ in open('edges.txt')))\n```",
        ),
        MockRule::new("requirement analyst", normalized.to_string()),
    ];
    let p = pipeline_with(rules, Arc::new(InterpreterExecutor::python(10.0)), empty_kb());
    let (answer, trace) = p.solve(&RawQuestion::new("edges in file")).await;
    assert_eq!(trace.staged_files, [graph]);
    assert_eq!(answer.text, "3");
    assert_eq!(trace.call_count(AgentRole::Answer), 0);
}

#[tokio::test]
async fn reasoning_failure_keeps_last_coding_error() {
    let rules = vec![
        MockRule::new("write Python codes", "```python\n# bad\n```"),
        MockRule::new("graph reasoning problem", " "),
        MockRule::new(
            "requirement analyst",
            r#"{"reformatted_problem": "p", "graph_type": "undirected", "input_data": "0-1", "output_format": "None"}"#,
        ),
    ];
    let p = pipeline_with(rules, Arc::new(StubExecutor::new()), empty_kb());
    let (answer, trace) = p.solve(&RawQuestion::new("q")).await;
    assert_eq!(answer.status, SolveStatus::Failed);
    assert!(trace.errors.iter().any(|e| e.starts_with("coding: runtime")));
    assert_eq!(trace.call_count(AgentRole::Reasoning), 1);
}

fn experience(problem_type: &str, question: &str) -> ExperienceEntry {
    ExperienceEntry {
        question: question.into(),
        answer: "1".into(),
        thought: String::new(),
        code: "print(1)".into(),
        problem_type: problem_type.into(),
    }
}

#[tokio::test]
async fn gate_uses_experience_only_when_similar() {
    let mut kb = empty_kb();
    kb.add_experience(experience("count", "count undirected")).await.unwrap();
    let p = pipeline_with(item_rules(), ok_executor(), kb);
    let (_, trace) = p.solve(&RawQuestion::new("a")).await;
    assert_eq!(trace.retrieval.unwrap().kind, RetrievalKind::Experience);
    let (_, trace) = p
        .solve_with(&RawQuestion::new("a"), &RetrievalPolicy::DocumentationOnly)
        .await;
    assert_eq!(trace.retrieval.unwrap().kind, RetrievalKind::Empty);
}

#[tokio::test]
async fn pipeline_drives_collection() {
    let rules = vec![
        MockRule::new("output format reviewer", r#"{"need_adjustment": false, "output": ""}"#),
        MockRule::new("Experience Information", "```python\n# ok\nprint(1)\n```"),
        MockRule::new("write Python codes", "```python\n# plain\nprint(1)\n```"),
        MockRule::new(
            "requirement analyst",
            r#"{"reformatted_problem": "count", "graph_type": "undirected", "input_data": "0-1", "output_format": "integer"}"#,
        ),
    ];
    let exec = StubExecutor::new()
        .on("# ok", ExecutionOutcome::success("1\n"))
        .on("# plain", ExecutionOutcome::success("1\n"));
    let p = pipeline_with(rules, Arc::new(exec), empty_kb());
    let rec = |id: &str, answer: &str| ProblemRecord {
        id: id.into(),
        question: format!("question {id}"),
        gold_answer: answer.into(),
        problem_type: "count".into(),
    };
    let out = Solver::solve(&p, &rec("t1", "1"), None).await.unwrap();
    assert_eq!(out.code.as_deref(), Some("# plain\nprint(1)"));
    assert_eq!(out.thought, "count");

    let train = [rec("t1", "2"), rec("t2", "1"), rec("t3", "1")];
    let valid = [rec("v1", "1"), rec("v2", "3")];
    let report = run_collection(&train, &valid, &p, 10, 2).await;
    assert_eq!(report.pool.get("count").len(), 2);
    assert_eq!(report.utilities.values().copied().collect::<Vec<_>>(), [1, 1]);
    assert_eq!(report.selected[0].question, "question t2");
}

fn fenced(tag: usize) -> String {
    format!("```python\n# v{tag}\nprint({tag})\n```")
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn call_sequence_follows_retry_budget(failures in 0usize..6, adjust in 0usize..5) {
        let mut rules = Vec::new();
        for i in 0..adjust {
            rules.push(MockRule::new(
                format!("content to be reviewed): d{i}"),
                json!({"need_adjustment": true, "output": format!("d{}", i + 1)}).to_string(),
            ));
        }
        rules.push(MockRule::new("output format reviewer", json!({"need_adjustment": true, "output": "d0"}).to_string()));
        for i in (1..6).rev() {
            rules.push(MockRule::new(format!("# v{i}"), fenced(i + 1)));
        }
        rules.push(MockRule::new("write Python codes", fenced(1)));
        rules.push(MockRule::new("graph reasoning problem", "<answer>r</answer>"));
        rules.push(MockRule::new(
            "requirement analyst",
            r#"{"reformatted_problem": "p", "graph_type": "undirected", "input_data": "0-1", "output_format": "a letter"}"#,
        ));
        let mut exec = StubExecutor::new();
        for i in 1..=6 {
            let outcome = if i > failures {
                ExecutionOutcome::success("x\n")
            } else {
                ExecutionOutcome::failure(1, "Traceback\nValueError")
            };
            exec = exec.on(format!("# v{i}\n"), outcome);
        }
        let p = pipeline_with(rules, Arc::new(exec), empty_kb());
        let rt = tokio::runtime::Runtime::new().unwrap();
        let (answer, trace) = rt.block_on(p.solve(&RawQuestion::new("q")));

        let coding = trace.call_count(AgentRole::Coding);
        let reasoning = trace.call_count(AgentRole::Reasoning);
        let answers = trace.call_count(AgentRole::Answer);
        proptest::prop_assert_eq!(coding, (failures + 1).min(3));
        proptest::prop_assert_eq!(reasoning, usize::from(failures >= 3));
        proptest::prop_assert!((1..=3).contains(&answers));
        let expected = if failures >= 3 { SolveStatus::SolvedByReasoning } else { SolveStatus::SolvedByCode };
        proptest::prop_assert_eq!(answer.status, expected);
        let seq = trace.agent_sequence();
        proptest::prop_assert_eq!(&seq[..2], &[AgentRole::Question, AgentRole::Search]);
        proptest::prop_assert_eq!(*seq.last().unwrap(), AgentRole::Answer);
    }
}
