use serde::Deserialize;

use crate::error::{format, Result};

const BUILTIN: &str = include_str!("../../assets/prompt_templates.json");

pub const TEMPLATE_COUNT: usize = 10;

/// The fixed set of prompt sentences placed in front of the audio prompt.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct PromptTemplates {
    pub version: u32,
    templates: Vec<String>,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("bundled prompt templates are valid")
    }

    pub fn parse(json: &str) -> Result<Self> {
        let t: PromptTemplates = serde_json::from_str(json)?;
        if t.templates.len() != TEMPLATE_COUNT {
            return format(format!("expected {TEMPLATE_COUNT} prompt templates, found {}", t.templates.len()));
        }
        Ok(t)
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.templates.get(i).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}
