//! Prompt templates with `{name}` placeholders.
//!
//! A placeholder is an opening brace, an identifier (`[A-Za-z_][A-Za-z0-9_]*`) and a
//! closing brace. Any other brace is literal text, so JSON snippets inside a template
//! body survive rendering untouched. Rendering is single pass: substituted values are
//! never rescanned for placeholders.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gateway::AgentRole;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let body = body.into();
        let segments = parse_segments(&body);
        let mut seen = HashSet::new();
        for segment in &segments {
            if let Segment::Slot(slot) = segment {
                if !seen.insert(slot.as_str()) {
                    return Err(Error::InvalidTemplate {
                        name,
                        reason: format!("placeholder `{slot}` appears more than once"),
                    });
                }
            }
        }
        Ok(Self {
            name,
            body,
            segments,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Placeholder names in order of appearance.
    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(name) => Some(name.as_str()),
            Segment::Text(_) => None,
        })
    }

    pub fn render(&self, bindings: &HashMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Text(text) => out.push_str(text),
                Segment::Slot(name) => {
                    let value = bindings
                        .get(name.as_str())
                        .ok_or_else(|| Error::MissingBinding(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// Substitutes every placeholder of `template` with its binding.
pub fn render_prompt(template: &PromptTemplate, bindings: &HashMap<&str, String>) -> Result<String> {
    template.render(bindings)
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn parse_segments(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .char_indices()
            .find(|&(i, c)| if i == 0 { !is_ident_start(c) } else { !is_ident_char(c) })
            .map(|(i, _)| i)
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            if !text.is_empty() {
                segments.push(Segment::Text(std::mem::take(&mut text)));
            }
            segments.push(Segment::Slot(after[..ident_len].to_string()));
            rest = &after[ident_len + 1..];
        } else {
            text.push('{');
            rest = after;
        }
    }
    text.push_str(rest);
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    segments
}

/// The five agent templates.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: HashMap<String, PromptTemplate>,
}

const DEFAULTS: [(AgentRole, &str); 5] = [
    (AgentRole::Question, include_str!("../../templates/question.txt")),
    (AgentRole::Search, include_str!("../../templates/search.txt")),
    (AgentRole::Coding, include_str!("../../templates/coding.txt")),
    (AgentRole::Reasoning, include_str!("../../templates/reasoning.txt")),
    (AgentRole::Answer, include_str!("../../templates/answer.txt")),
];

impl TemplateSet {
    /// Templates bundled into the binary from `templates/`.
    pub fn defaults() -> Self {
        let templates = DEFAULTS
            .iter()
            .map(|(role, body)| {
                let template = PromptTemplate::new(role.as_str(), *body)
                    .expect("bundled templates are well formed");
                (role.as_str().to_string(), template)
            })
            .collect();
        Self { templates }
    }

    /// Loads `<role>.txt` for each of the five roles from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut templates = HashMap::new();
        for role in AgentRole::ALL {
            let path = dir.join(format!("{}.txt", role.as_str()));
            let body = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
            templates.insert(
                role.as_str().to_string(),
                PromptTemplate::new(role.as_str(), body)?,
            );
        }
        Ok(Self { templates })
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(name)
            .ok_or_else(|| Error::UnknownTemplate(name.to_string()))
    }

    pub fn for_role(&self, role: AgentRole) -> Result<&PromptTemplate> {
        self.get(role.as_str())
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.name.clone(), template);
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::defaults()
    }
}
