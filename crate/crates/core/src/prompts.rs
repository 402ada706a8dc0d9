//! Versioned prompt templates for the model-backed agents.
//!
//! Each template file holds a system part and a user part separated by a
//! line containing `===USER===`. Placeholders are written `{{name}}`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backends::Message;

pub const PROMPT_VERSION: &str = "1";

const SEPARATOR: &str = "===USER===";

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    name: String,
    system: String,
    user: String,
}

impl PromptTemplate {
    pub fn parse(name: &str, raw: &str) -> Result<Self, String> {
        let (system, user) =
            raw.split_once(SEPARATOR).ok_or_else(|| format!("prompt `{name}` lacks a {SEPARATOR} line"))?;
        Ok(Self { name: name.to_string(), system: system.trim().to_string(), user: user.trim().to_string() })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The template text in file form.
    pub fn source(&self) -> String {
        format!("{}\n{SEPARATOR}\n{}", self.system, self.user)
    }

    /// Substitutes every `{{key}}`. Unknown placeholders are left in place.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Vec<Message> {
        vec![Message::system(fill(&self.system, vars)), Message::user(fill(&self.user, vars))]
    }
}

fn fill(template: &str, vars: &BTreeMap<&str, String>) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    pub think: PromptTemplate,
    pub plan: PromptTemplate,
    pub ask: PromptTemplate,
    pub detect: PromptTemplate,
    pub realise: PromptTemplate,
}

impl PromptSet {
    pub fn builtin() -> Self {
        let p = |name, raw| PromptTemplate::parse(name, raw).expect("embedded prompt");
        Self {
            think: p("think", include_str!("../prompts/think.txt")),
            plan: p("plan", include_str!("../prompts/plan.txt")),
            ask: p("ask", include_str!("../prompts/ask.txt")),
            detect: p("detect", include_str!("../prompts/detect.txt")),
            realise: p("realise", include_str!("../prompts/realise.txt")),
        }
    }

    /// Loads `<dir>/<step>.txt` where present, falling back to the embedded
    /// template for missing files.
    pub fn from_dir(dir: &Path) -> Result<Self, String> {
        let mut set = Self::builtin();
        for (name, slot) in [
            ("think", &mut set.think),
            ("plan", &mut set.plan),
            ("ask", &mut set.ask),
            ("detect", &mut set.detect),
            ("realise", &mut set.realise),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let raw = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                *slot = PromptTemplate::parse(name, &raw)?;
            }
        }
        Ok(set)
    }
}

/// Extracts the first balanced JSON object from model output, tolerating
/// surrounding prose or code fences.
pub fn extract_json_object(text: &str) -> Option<serde_json::Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        if let Ok(v) = serde_json::from_str(&text[open..=i]) {
                            return Some(v);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        start = open + 1;
    }
    None
}
