//! Plain-text prompt templates with `{placeholder}` substitution.
//!
//! A placeholder is `{` + lowercase identifier + `}`. Anything else,
//! including JSON braces in format examples, passes through untouched.
//! Rendering fails on a placeholder with no binding.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {template}: no binding for placeholder {{{name}}}")]
    MissingVar { template: String, name: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    text: String,
}

fn placeholder_at(text: &str) -> Option<&str> {
    // Caller guarantees `text` starts just past a '{'.
    let end = text.find('}')?;
    let name = &text[..end];
    if !name.is_empty() && name.bytes().all(|b| b == b'_' || b.is_ascii_lowercase()) {
        Some(name)
    } else {
        None
    }
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Template { name: name.into(), text: text.into() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(pos) = rest.find('{') {
            out.push_str(&rest[..pos]);
            let after = &rest[pos + 1..];
            match placeholder_at(after) {
                Some(name) => {
                    let value = vars.get(name).ok_or_else(|| TemplateError::MissingVar {
                        template: self.name.clone(),
                        name: name.to_string(),
                    })?;
                    out.push_str(value);
                    rest = &after[name.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// The four pipeline prompts: summarize, insight, act, reflect.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub sum: Template,
    pub ins: Template,
    pub act: Template,
    pub reflect: Template,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            sum: Template::new("sum", include_str!("../../templates/sum.txt")),
            ins: Template::new("ins", include_str!("../../templates/ins.txt")),
            act: Template::new("act", include_str!("../../templates/act.txt")),
            reflect: Template::new("ref", include_str!("../../templates/ref.txt")),
        }
    }
}

impl TemplateSet {
    /// Reads `sum.txt`, `ins.txt`, `act.txt`, `ref.txt` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |stem: &str| -> Result<Template, TemplateError> {
            let path = dir.join(format!("{stem}.txt"));
            let text = std::fs::read_to_string(&path)
                .map_err(|source| TemplateError::Io { path: path.clone(), source })?;
            Ok(Template::new(stem, text))
        };
        Ok(TemplateSet {
            sum: read("sum")?,
            ins: read("ins")?,
            act: read("act")?,
            reflect: read("ref")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn substitutes_bound_placeholders() {
        let t = Template::new("t", "day {day}, step {step_index}.");
        let got = t.render(&vars(&[("day", "2"), ("step_index", "7")])).unwrap();
        assert_eq!(got, "day 2, step 7.");
    }

    #[test]
    fn unbound_placeholder_fails_loudly() {
        let t = Template::new("t", "hello {name}");
        let err = t.render(&BTreeMap::new()).unwrap_err();
        match err {
            TemplateError::MissingVar { template, name } => {
                assert_eq!(template, "t");
                assert_eq!(name, "name");
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn json_braces_pass_through() {
        let t = Template::new("t", r#"Respond {"summary": "<text>"} for {kind}."#);
        let got = t.render(&vars(&[("kind", "bid")])).unwrap();
        assert_eq!(got, r#"Respond {"summary": "<text>"} for bid."#);
    }

    #[test]
    fn brace_without_close_is_literal() {
        let t = Template::new("t", "open { brace and {x}");
        let got = t.render(&vars(&[("x", "1")])).unwrap();
        assert_eq!(got, "open { brace and 1");
    }

    #[test]
    fn default_set_renders_with_documented_vars() {
        let set = TemplateSet::default();
        let sum = set
            .sum
            .render(&vars(&[
                ("kind", "bid"),
                ("day", "0"),
                ("step", "3"),
                ("steps_per_day", "24"),
                ("entries", "(none)"),
            ]))
            .unwrap();
        assert!(sum.contains("\"summary\""));
        let ins = set
            .ins
            .render(&vars(&[
                ("day", "0"),
                ("step", "3"),
                ("steps_per_day", "24"),
                ("environment_status", "{}"),
                ("history", "(none)"),
                ("bidding_reference", "20"),
            ]))
            .unwrap();
        assert!(ins.contains("adjustment range for"));
        assert!(ins.contains("[-0.5,-0.4), [-0.4,-0.3)"));
        assert!(ins.contains("[0.4,0.5]"));
        let act = set
            .act
            .render(&vars(&[
                ("day", "0"),
                ("step", "3"),
                ("steps_per_day", "24"),
                ("environment_status", "{}"),
                ("history", "(none)"),
                ("bidding_reference", "20"),
                ("insights", "(none)"),
            ]))
            .unwrap();
        assert!(act.contains("\"adjustment\""));
        assert!(!act.contains("adjustment range for"));
        let refl = set
            .reflect
            .render(&vars(&[
                ("kind", "bid"),
                ("day", "0"),
                ("entries", "(none)"),
                ("environment_status", "{}"),
            ]))
            .unwrap();
        assert!(refl.contains("\"reflection\""));
    }

    #[test]
    fn load_dir_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for stem in ["sum", "ins", "act", "ref"] {
            std::fs::write(dir.path().join(format!("{stem}.txt")), format!("{stem} body")).unwrap();
        }
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.ins.text(), "ins body");
        assert!(TemplateSet::load_dir(&dir.path().join("missing")).is_err());
    }
}
