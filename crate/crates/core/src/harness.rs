//! Benchmark evaluation: dataset loading, exact-match and GNN k/K scoring, and
//! grouped accuracy and token reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tracing::warn;

use crate::error::{Error, Result};
use crate::gateway::{AgentRole, TokenUsage};
use crate::normalize::RawQuestion;
use crate::orchestrator::{write_trace_file, FinalAnswer, Pipeline, PipelineTrace, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Basic,
    Macro,
    Micro,
    Gnn,
    Others,
}

impl TaskCategory {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "basic" => Self::Basic,
            "macro" => Self::Macro,
            "micro" => Self::Micro,
            "gnn" => Self::Gnn,
            "others" => Self::Others,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Basic => "basic",
            Self::Macro => "macro",
            Self::Micro => "micro",
            Self::Gnn => "gnn",
            Self::Others => "others",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputClass {
    YesNo,
    Digits,
    ListSet,
    Others,
}

impl OutputClass {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "yes_no" => Self::YesNo,
            "digits" => Self::Digits,
            "list_set" => Self::ListSet,
            "others" => Self::Others,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::YesNo => "yes_no",
            Self::Digits => "digits",
            Self::ListSet => "list_set",
            Self::Others => "others",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    #[serde(rename = "type")]
    pub problem_type: String,
    pub category: TaskCategory,
    pub output_class: OutputClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_params: Option<BTreeMap<String, Value>>,
}

#[derive(Deserialize)]
struct RawItem {
    id: String,
    question: String,
    answer: String,
    #[serde(rename = "type")]
    problem_type: String,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    output_class: Option<String>,
    #[serde(default)]
    required_params: Option<BTreeMap<String, Value>>,
}

/// Instruction appended to coding prompts of GNN items.
pub fn gnn_requirements(required: &BTreeMap<String, Value>) -> String {
    let keys: Vec<&str> = required.keys().map(String::as_str).collect();
    format!(
        "After the script finishes, print the configuration it actually used as one JSON object \
         on the last line of standard output, with the keys: {}.",
        keys.join(", ")
    )
}

impl BenchmarkItem {
    pub fn to_raw_question(&self) -> RawQuestion {
        let mut raw = RawQuestion::new(self.question.clone()).with_id(self.id.clone());
        if self.category == TaskCategory::Gnn {
            raw.coding_requirements = self.required_params.as_ref().map(gnn_requirements);
        }
        raw
    }
}

/// Reads a JSONL dataset. Unknown category or output class values fall back to
/// `others`; GNN items must carry a nonempty `required_params`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<BenchmarkItem>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut items = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = n + 1;
        let schema = |message: String| Error::Schema {
            index: line_no,
            message,
        };
        let r: RawItem = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        let category = match r.category.as_deref() {
            None => TaskCategory::Others,
            Some(c) => TaskCategory::parse(c).unwrap_or_else(|| {
                warn!(line = line_no, category = c, "unknown category, using others");
                TaskCategory::Others
            }),
        };
        let output_class = match r.output_class.as_deref() {
            None => OutputClass::Others,
            Some(c) => OutputClass::parse(c).unwrap_or_else(|| {
                warn!(line = line_no, output_class = c, "unknown output class, using others");
                OutputClass::Others
            }),
        };
        if category == TaskCategory::Gnn && r.required_params.as_ref().is_none_or(|p| p.is_empty()) {
            return Err(schema("gnn item without required_params".into()));
        }
        items.push(BenchmarkItem {
            id: r.id,
            question: r.question,
            gold_answer: r.answer,
            problem_type: r.problem_type,
            category,
            output_class,
            required_params: r.required_params,
        });
    }
    Ok(items)
}

/// 1 when the trimmed strings are identical, else 0.
pub fn exact_match(prediction: &str, gold: &str) -> u8 {
    u8::from(prediction.trim() == gold.trim())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnSpecCheck {
    pub required_params: BTreeMap<String, Value>,
    pub emitted_params: BTreeMap<String, Value>,
    pub ran_ok: bool,
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Numbers compare by value (strings holding numbers included), strings ignore ASCII
/// case and surrounding whitespace, lists compare element-wise in order.
pub fn param_matches(expected: &Value, observed: &Value) -> bool {
    if let (Some(a), Some(b)) = (as_number(expected), as_number(observed)) {
        return a == b;
    }
    match (expected, observed) {
        (Value::Array(a), Value::Array(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| param_matches(x, y))
        }
        (Value::Object(a), Value::Object(b)) => {
            a.len() == b.len()
                && a.iter().all(|(k, x)| b.get(k).is_some_and(|y| param_matches(x, y)))
        }
        (Value::String(a), Value::String(b)) => a.trim().eq_ignore_ascii_case(b.trim()),
        (a, b) => a == b,
    }
}

/// Fraction k/K of required parameters realized; 0 when the script did not run.
pub fn score_gnn(check: &GnnSpecCheck) -> f64 {
    if !check.ran_ok || check.required_params.is_empty() {
        return 0.0;
    }
    let k = check
        .required_params
        .iter()
        .filter(|(name, expected)| {
            check
                .emitted_params
                .get(*name)
                .is_some_and(|observed| param_matches(expected, observed))
        })
        .count();
    k as f64 / check.required_params.len() as f64
}

/// The last line of `stdout` that parses as a JSON object.
pub fn parse_emitted_params(stdout: &str) -> Option<BTreeMap<String, Value>> {
    stdout.lines().rev().find_map(|line| {
        serde_json::from_str::<Map<String, Value>>(line.trim())
            .ok()
            .map(|m| m.into_iter().collect())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub category: TaskCategory,
    pub output_class: OutputClass,
    pub prediction: String,
    pub score: f64,
    pub status: SolveStatus,
    pub tokens_used: u64,
    pub infrastructure_failure: bool,
}

pub fn evaluate(item: &BenchmarkItem, answer: &FinalAnswer, trace: &PipelineTrace) -> EvalRecord {
    let score = if item.category == TaskCategory::Gnn {
        let stdout = trace.attempts.iter().find_map(|a| a.result.as_deref());
        let check = GnnSpecCheck {
            required_params: item.required_params.clone().unwrap_or_default(),
            emitted_params: stdout.and_then(parse_emitted_params).unwrap_or_default(),
            ran_ok: stdout.is_some(),
        };
        score_gnn(&check)
    } else {
        f64::from(exact_match(&answer.text, &item.gold_answer))
    };
    EvalRecord {
        item_id: item.id.clone(),
        category: item.category,
        output_class: item.output_class,
        prediction: answer.text.clone(),
        score,
        status: answer.status,
        tokens_used: trace.total_usage.total(),
        infrastructure_failure: trace.infrastructure_failure,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub count: usize,
    pub mean_score: f64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub items: usize,
    pub overall: f64,
    pub per_category: BTreeMap<String, GroupStat>,
    pub per_output_class: BTreeMap<String, GroupStat>,
    pub per_status: BTreeMap<String, usize>,
    pub tokens_per_role: BTreeMap<AgentRole, TokenUsage>,
    pub total_tokens: u64,
    pub mean_tokens: f64,
    pub infrastructure_failures: usize,
    pub records: Vec<EvalRecord>,
}

fn group<'a>(records: impl Iterator<Item = (&'a str, &'a EvalRecord)>) -> BTreeMap<String, GroupStat> {
    let mut acc: BTreeMap<String, (usize, f64, u64)> = BTreeMap::new();
    for (key, r) in records {
        let e = acc.entry(key.to_string()).or_default();
        e.0 += 1;
        e.1 += r.score;
        e.2 += r.tokens_used;
    }
    acc.into_iter()
        .map(|(k, (count, sum, tokens))| {
            (
                k,
                GroupStat {
                    count,
                    mean_score: sum / count as f64,
                    total_tokens: tokens,
                },
            )
        })
        .collect()
}

fn status_label(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::SolvedByCode => "solved_by_code",
        SolveStatus::SolvedByReasoning => "solved_by_reasoning",
        SolveStatus::Failed => "failed",
    }
}

impl Report {
    pub fn from_records(records: Vec<EvalRecord>, tokens_per_role: BTreeMap<AgentRole, TokenUsage>) -> Self {
        let n = records.len();
        let sum: f64 = records.iter().map(|r| r.score).sum();
        let total_tokens: u64 = records.iter().map(|r| r.tokens_used).sum();
        let mut per_status = BTreeMap::new();
        for r in &records {
            *per_status.entry(status_label(r.status).to_string()).or_insert(0) += 1;
        }
        Self {
            items: n,
            overall: if n == 0 { 0.0 } else { sum / n as f64 },
            per_category: group(records.iter().map(|r| (r.category.as_str(), r))),
            per_output_class: group(records.iter().map(|r| (r.output_class.as_str(), r))),
            per_status,
            tokens_per_role,
            total_tokens,
            mean_tokens: if n == 0 { 0.0 } else { total_tokens as f64 / n as f64 },
            infrastructure_failures: records.iter().filter(|r| r.infrastructure_failure).count(),
            records,
        }
    }

    pub fn from_runs(runs: &[RunRecord]) -> Self {
        let mut per_role: BTreeMap<AgentRole, TokenUsage> = BTreeMap::new();
        let records = runs
            .iter()
            .map(|run| {
                for (role, usage) in &run.trace.usage {
                    *per_role.entry(*role).or_default() += *usage;
                }
                evaluate(&run.item, &run.trace.answer, &run.trace)
            })
            .collect();
        Self::from_records(records, per_role)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned plain-text summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>6} {:>10} {:>12}", "group", "items", "accuracy", "tokens");
        let _ = writeln!(
            out,
            "{:<22} {:>6} {:>10.4} {:>12}",
            "overall", self.items, self.overall, self.total_tokens
        );
        for (prefix, groups) in [("category", &self.per_category), ("output", &self.per_output_class)] {
            for (k, g) in groups {
                let _ = writeln!(
                    out,
                    "{:<22} {:>6} {:>10.4} {:>12}",
                    format!("{prefix}:{k}"),
                    g.count,
                    g.mean_score,
                    g.total_tokens
                );
            }
        }
        for (role, usage) in &self.tokens_per_role {
            let _ = writeln!(
                out,
                "{:<22} {:>6} {:>10} {:>12}",
                format!("tokens:{role}"),
                "",
                "",
                usage.total()
            );
        }
        out
    }
}

/// One persisted benchmark run: the item and the pipeline trace that answered it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item: BenchmarkItem,
    pub trace: PipelineTrace,
}

pub async fn run_benchmark(
    pipeline: &Pipeline,
    items: &[BenchmarkItem],
    parallelism: usize,
) -> (Report, Vec<RunRecord>) {
    let raws: Vec<RawQuestion> = items.iter().map(BenchmarkItem::to_raw_question).collect();
    let results = pipeline.solve_batch(&raws, parallelism).await;
    let runs: Vec<RunRecord> = items
        .iter()
        .zip(results)
        .map(|(item, (_, trace))| RunRecord {
            item: item.clone(),
            trace,
        })
        .collect();
    (Report::from_runs(&runs), runs)
}

/// Writes one `<id>.json` per run into `dir`.
pub fn write_runs(dir: impl AsRef<Path>, runs: &[RunRecord]) -> Result<Vec<PathBuf>> {
    runs.iter()
        .enumerate()
        .map(|(i, run)| write_trace_file(dir.as_ref(), &run.trace, i, run))
        .collect()
}

/// Reads every `*.json` run file in `dir`, in file-name order.
pub fn read_runs(dir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| crate::knowledge::read_json(p))
        .collect()
}
