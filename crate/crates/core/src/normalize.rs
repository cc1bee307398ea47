//! Question agent (raw text to four key arguments) and answer agent (format self-check).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tracing::warn;

use crate::error::{Error, Result};
use crate::gateway::{AgentRole, Session};

pub const DEFAULT_GRAPH_TYPE: &str = "undirected";
const JSON_ONLY_SUFFIX: &str = "\n\nReply with only the JSON object.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQuestion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    /// Extra instructions appended to every coding prompt for this question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coding_requirements: Option<String>,
}

impl RawQuestion {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            item_id: None,
            coding_requirements: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.item_id = Some(id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedQuestion {
    pub refined_question: String,
    pub graph_type: String,
    pub input_data: String,
    pub output_format: Option<String>,
}

impl NormalizedQuestion {
    /// Output format as bound into prompts: the literal `None` when absent.
    pub fn output_format_text(&self) -> &str {
        self.output_format.as_deref().unwrap_or("None")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerDraft {
    pub iteration: u32,
    pub text: String,
    /// Parsed from the answer agent; absent for the initial draft.
    pub need_adjustment: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedAnswer {
    pub text: String,
    pub drafts: Vec<AnswerDraft>,
}

/// Extracts the first JSON object from a model reply.
///
/// Leading prose and code fences are skipped, trailing text is ignored and Python
/// literals (`True`, `False`, `None`) outside strings are accepted. Keys are
/// lowercased so callers can match field names case-insensitively.
pub fn parse_agent_json(model_text: &str) -> Result<Map<String, Value>> {
    for (start, _) in model_text.match_indices('{') {
        let candidate = &model_text[start..];
        let object = first_object(candidate).or_else(|| first_object(&pythonic_to_json(candidate)));
        if let Some(object) = object {
            return Ok(lowercase_keys(object));
        }
    }
    Err(Error::ParseFailure)
}

fn first_object(text: &str) -> Option<Map<String, Value>> {
    match serde_json::Deserializer::from_str(text).into_iter::<Value>().next() {
        Some(Ok(Value::Object(map))) => Some(map),
        _ => None,
    }
}

fn lowercase_keys(map: Map<String, Value>) -> Map<String, Value> {
    let mut out = Map::new();
    for (key, value) in map {
        out.entry(key.to_lowercase()).or_insert(value);
    }
    out
}

fn pythonic_to_json(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        out.push_str(match word.as_str() {
            "True" => "true",
            "False" => "false",
            "None" => "null",
            other => other,
        });
        word.clear();
    };
    for c in text.chars() {
        if in_string {
            out.push(c);
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        if c.is_ascii_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        flush(&mut word, &mut out);
        if c == '"' {
            in_string = true;
        }
        out.push(c);
    }
    flush(&mut word, &mut out);
    out
}

fn text_field(map: &Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| match map.get(*k)? {
        Value::Null => None,
        Value::String(s) => Some(s.trim().to_string()),
        other => Some(other.to_string()),
    })
}

fn is_none_marker(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("null")
}

/// Calls `role` with `prompt`; on an unparseable reply asks once more for bare JSON.
async fn chat_json(
    session: &Session,
    role: AgentRole,
    prompt: String,
) -> Result<Map<String, Value>> {
    let reply = session.chat(role, prompt.clone()).await?;
    match parse_agent_json(&reply.text) {
        Ok(map) => Ok(map),
        Err(_) => {
            let reply = session.chat(role, prompt + JSON_ONLY_SUFFIX).await?;
            parse_agent_json(&reply.text)
        }
    }
}

/// Runs the question agent.
pub async fn normalize_question(raw: &RawQuestion, session: &Session) -> Result<NormalizedQuestion> {
    if raw.text.trim().is_empty() {
        return Err(Error::NormalizationParse("question text is empty".into()));
    }
    let bindings = HashMap::from([("original_question", raw.text.clone())]);
    let prompt = session.render(AgentRole::Question, &bindings)?;
    let map = match chat_json(session, AgentRole::Question, prompt).await {
        Ok(map) => map,
        Err(Error::ParseFailure) => {
            return Err(Error::NormalizationParse(
                "no JSON object after retry".into(),
            ))
        }
        Err(e) => return Err(e),
    };

    let refined_question = text_field(
        &map,
        &["reformatted_problem", "refined_question", "reformatted_question", "problem"],
    )
    .filter(|s| !s.is_empty())
    .unwrap_or_else(|| raw.text.trim().to_string());
    let graph_type = text_field(&map, &["graph_type"])
        .filter(|s| !is_none_marker(s))
        .unwrap_or_else(|| DEFAULT_GRAPH_TYPE.to_string());
    let input_data = text_field(&map, &["input_data", "input_graph"])
        .filter(|s| !is_none_marker(s))
        .unwrap_or_else(|| raw.text.trim().to_string());
    let output_format = text_field(&map, &["output_format"]).filter(|s| !is_none_marker(s));

    Ok(NormalizedQuestion {
        refined_question,
        graph_type,
        input_data,
        output_format,
    })
}

fn parse_flag(value: &Value) -> Option<bool> {
    match value {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" => Some(true),
            "false" | "no" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Runs up to `n_check` answer-agent iterations over `result`.
///
/// Stops at the first reply with `need_adjustment = false`, keeping the current
/// draft. An unusable reply also stops the loop and keeps the current draft.
/// Without an output format the result is returned as is.
pub async fn format_answer(
    output_format: Option<&str>,
    result: &str,
    session: &Session,
    n_check: u32,
) -> FormattedAnswer {
    let mut drafts = vec![AnswerDraft {
        iteration: 0,
        text: result.to_string(),
        need_adjustment: None,
    }];
    let Some(output_format) = output_format else {
        return FormattedAnswer {
            text: result.to_string(),
            drafts,
        };
    };

    let mut current = result.to_string();
    for iteration in 1..=n_check {
        let bindings = HashMap::from([
            ("output_format", output_format.to_string()),
            ("output", current.clone()),
        ]);
        // No JSON-only retry here: each iteration is exactly one call.
        let reply = match session.render(AgentRole::Answer, &bindings) {
            Ok(prompt) => match session.chat(AgentRole::Answer, prompt).await {
                Ok(reply) => parse_agent_json(&reply.text),
                Err(e) => Err(e),
            },
            Err(e) => Err(e),
        };
        let map = match reply {
            Ok(map) => map,
            Err(e) => {
                warn!(error = %e, iteration, "answer agent failed; keeping previous draft");
                break;
            }
        };
        let Some(need_adjustment) = map.get("need_adjustment").and_then(parse_flag) else {
            warn!(iteration, "answer agent reply lacks need_adjustment");
            break;
        };
        if !need_adjustment {
            drafts.push(AnswerDraft {
                iteration,
                text: current.clone(),
                need_adjustment: Some(false),
            });
            break;
        }
        match map.get("output").and_then(Value::as_str) {
            Some(adjusted) if !adjusted.trim().is_empty() => {
                current = adjusted.to_string();
                drafts.push(AnswerDraft {
                    iteration,
                    text: current.clone(),
                    need_adjustment: Some(true),
                });
            }
            _ => {
                warn!(iteration, "answer agent requested adjustment without output");
                break;
            }
        }
    }
    FormattedAnswer {
        text: current,
        drafts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, MockBackend, MockRule};
    use proptest::prelude::*;
    use std::sync::Arc;

    const HAMILTON_QUESTION: &str = "In an undirected graph, (i,j) means that node i and node j are connected \
with an undirected edge. The nodes are numbered from 0 to 6, and the edges are: (0,3) (0,1) (1,6) (2,4) (3,5) (3,6) (4,5).\n\
Q: Is there a path in this graph that visits every node exactly once? If yes, give the path.\n\
A: In the answer, list the nodes of the path in order. Output format such as : Yes. The path can be: 1,4,8.";

    fn gateway(rules: Vec<MockRule>) -> (Gateway, Arc<MockBackend>) {
        let backend = Arc::new(MockBackend::new(rules));
        (Gateway::new(backend.clone()), backend)
    }

    #[test]
    fn parse_fenced() {
        let map = parse_agent_json("```json\n{\"Graph_Type\": \"directed\"}\n```").unwrap();
        assert_eq!(map["graph_type"], "directed");
    }

    #[test]
    fn parse_first_object_with_trailing_prose() {
        let map = parse_agent_json("{\"a\":1} trailing prose {\"b\":2}").unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map["a"], 1);
    }

    #[test]
    fn parse_failure_without_braces() {
        assert!(matches!(parse_agent_json("no braces at all"), Err(Error::ParseFailure)));
        assert!(matches!(parse_agent_json("{ not json"), Err(Error::ParseFailure)));
    }

    #[test]
    fn parse_python_literals() {
        let map =
            parse_agent_json("Sure: {\"need_adjustment\": True, \"output\": \"True None\", \"x\": None}")
                .unwrap();
        assert_eq!(map["need_adjustment"], true);
        assert_eq!(map["output"], "True None");
        assert_eq!(map["x"], Value::Null);
    }

    #[test]
    fn parse_skips_leading_junk_brace() {
        let map = parse_agent_json("set {x} then {\"k\": \"v\"}").unwrap();
        assert_eq!(map["k"], "v");
    }

    proptest! {
        #[test]
        fn parse_is_idempotent_on_own_output(
            entries in proptest::collection::btree_map("[A-Za-z_]{1,6}", "[ -~]{0,12}", 0..6),
            prefix in "[ -z]{0,10}",
        ) {
            let prefix = prefix.replace('{', "");
            let object: Map<String, Value> =
                entries.into_iter().map(|(k, v)| (k, Value::String(v))).collect();
            let text = format!("{prefix}{}", Value::Object(object));
            let once = parse_agent_json(&text).unwrap();
            let twice = parse_agent_json(&Value::Object(once.clone()).to_string()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[tokio::test]
    async fn normalizes_the_hamiltonian_question() {
        let reply = r#"```json
{
  "Reformatted_Problem": "Is there a path in this graph that visits every node exactly once? If yes, give the path.",
  "Graph_Type": "undirected",
  "Input_Data": {"Nodes": [0, 1, 2, 3, 4, 5, 6], "Edges": [[0, 3], [0, 1], [1, 6], [2, 4], [3, 5], [3, 6], [4, 5]]},
  "Output_Format": "Yes. The path can be: 1,4,8."
}
```"#;
        let (gw, backend) = gateway(vec![MockRule::new("requirement analyst", reply)]);
        let session = gw.session(None);
        let q = normalize_question(&RawQuestion::new(HAMILTON_QUESTION), &session)
            .await
            .unwrap();
        assert_eq!(q.graph_type, "undirected");
        assert!(q.refined_question.starts_with("Is there a path in this graph"));
        assert!(q.input_data.contains("\"Nodes\":[0,1,2,3,4,5,6]"));
        for edge in ["[0,3]", "[0,1]", "[1,6]", "[2,4]", "[3,5]", "[3,6]", "[4,5]"] {
            assert!(q.input_data.contains(edge), "missing {edge}");
        }
        assert_eq!(q.output_format.as_deref(), Some("Yes. The path can be: 1,4,8."));
        let prompts = backend.prompts();
        assert_eq!(prompts.len(), 1);
        assert!(prompts[0].contains("the edges are: (0,3) (0,1) (1,6) (2,4) (3,5) (3,6) (4,5)"));
    }

    #[tokio::test]
    async fn defaults_for_missing_type_and_format() {
        let reply = r#"{"Reformatted_Problem": "count the nodes", "Input_Data": "edges: (0,1)", "Output_Format": "None"}"#;
        let (gw, _) = gateway(vec![MockRule::new("", reply)]);
        let q = normalize_question(&RawQuestion::new("How many nodes? edges: (0,1)"), &gw.session(None))
            .await
            .unwrap();
        assert_eq!(q.graph_type, "undirected");
        assert_eq!(q.output_format, None);
        assert_eq!(q.output_format_text(), "None");

        let reply = r#"{"Reformatted_Problem": "p", "Graph_Type": null, "Input_Data": "g", "Output_Format": null}"#;
        let (gw, _) = gateway(vec![MockRule::new("", reply)]);
        let q = normalize_question(&RawQuestion::new("p g"), &gw.session(None))
            .await
            .unwrap();
        assert_eq!(q.graph_type, "undirected");
        assert_eq!(q.output_format, None);
    }

    #[tokio::test]
    async fn lenient_retry_then_failure() {
        let (gw, backend) = gateway(vec![
            MockRule::new("Reply with only the JSON object.", r#"{"Reformatted_Problem": "p", "Graph_Type": "directed", "Input_Data": "g"}"#),
            MockRule::new("", "I think the graph is directed."),
        ]);
        let q = normalize_question(&RawQuestion::new("q"), &gw.session(None)).await.unwrap();
        assert_eq!(q.graph_type, "directed");
        assert_eq!(backend.prompts().len(), 2);

        let (gw, backend) = gateway(vec![MockRule::new("", "prose only")]);
        let err = normalize_question(&RawQuestion::new("q"), &gw.session(None))
            .await
            .unwrap_err();
        assert!(matches!(err, Error::NormalizationParse(_)));
        assert_eq!(backend.prompts().len(), 2);
    }

    #[tokio::test]
    async fn formats_the_hamiltonian_answer() {
        let (gw, backend) = gateway(vec![
            MockRule::new(
                "(content to be reviewed): 0, 1, 6, 3, 5, 4, 2\n",
                r#"{"need_adjustment": true, "output": "Yes. The path can be: 0, 1, 6, 3, 5, 4, 2."}"#,
            ),
            MockRule::new(
                "(content to be reviewed): Yes. The path can be: 0, 1, 6, 3, 5, 4, 2.\n",
                r#"{"need_adjustment": false, "output": "Yes. The path can be: 0, 1, 6, 3, 5, 4, 2."}"#,
            ),
        ]);
        let out = format_answer(
            Some("Yes. The path can be: 1, 4, 8."),
            "0, 1, 6, 3, 5, 4, 2",
            &gw.session(None),
            3,
        )
        .await;
        assert_eq!(out.text, "Yes. The path can be: 0, 1, 6, 3, 5, 4, 2.");
        assert_eq!(backend.prompts().len(), 2);
        assert_eq!(out.drafts.len(), 3);
        assert_eq!(out.drafts[0].text, "0, 1, 6, 3, 5, 4, 2");
    }

    #[tokio::test]
    async fn pass_through_without_format() {
        let (gw, backend) = gateway(vec![]);
        let out = format_answer(None, "42", &gw.session(None), 3).await;
        assert_eq!(out.text, "42");
        assert!(backend.prompts().is_empty());
    }

    #[tokio::test]
    async fn fixed_point_exits_after_one_call() {
        let (gw, backend) = gateway(vec![MockRule::new(
            "",
            r#"{"need_adjustment": false, "output": "7"}"#,
        )]);
        let out = format_answer(Some("a number"), "7", &gw.session(None), 3).await;
        assert_eq!(out.text, "7");
        assert_eq!(backend.prompts().len(), 1);
    }

    #[tokio::test]
    async fn keeps_draft_on_unusable_reply() {
        let (gw, backend) = gateway(vec![MockRule::new("", "garbled")]);
        let out = format_answer(Some("fmt"), "raw", &gw.session(None), 3).await;
        assert_eq!(out.text, "raw");
        assert_eq!(backend.prompts().len(), 1);
    }

    #[tokio::test]
    async fn never_more_than_n_check_iterations() {
        let (gw, backend) = gateway(vec![MockRule::new(
            "",
            r#"{"need_adjustment": "True", "output": "again"}"#,
        )]);
        let out = format_answer(Some("fmt"), "x", &gw.session(None), 3).await;
        assert_eq!(out.text, "again");
        assert_eq!(backend.prompts().len(), 3);
    }
}
