use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::corpus::EntityLabel;

pub const FEW_SHOT_PLACEHOLDER: &str = "{FEW_SHOT_BLOCK}";
pub const TEST_INPUT_PLACEHOLDER: &str = "{TEST_INPUT}";
pub const OUTPUT_GRAMMAR_PLACEHOLDER: &str = "{OUTPUT_GRAMMAR}";

const BUILTIN_V1: &str = include_str!("../../templates/v1.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotTemplates {
    pub document: String,
    pub sentences: String,
    pub entities: String,
}

/// Section texts of the prompt template, loaded from a versioned TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub task_definition: String,
    pub context: String,
    pub category_definitions: String,
    pub output_format: String,
    pub unknown_instruction: String,
    pub few_shot: FewShotTemplates,
    pub test_input: String,
}

impl PromptTemplate {
    /// The template shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_V1).expect("builtin template is valid")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&raw)
    }

    pub fn from_toml_str(raw: &str) -> Result<Self, PromptError> {
        let template: PromptTemplate = toml::from_str(raw).map_err(|e| PromptError::Template(e.to_string()))?;
        template.validate()?;
        Ok(template)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let require = |field: &str, text: &str, placeholder: &str| {
            if text.contains(placeholder) {
                Ok(())
            } else {
                Err(PromptError::Template(format!("`{field}` must contain {placeholder}")))
            }
        };
        if self.version.trim().is_empty() {
            return Err(PromptError::Template("empty template version".into()));
        }
        require("few_shot.document", &self.few_shot.document, FEW_SHOT_PLACEHOLDER)?;
        require("few_shot.sentences", &self.few_shot.sentences, FEW_SHOT_PLACEHOLDER)?;
        require("few_shot.entities", &self.few_shot.entities, FEW_SHOT_PLACEHOLDER)?;
        require("test_input", &self.test_input, TEST_INPUT_PLACEHOLDER)?;
        require("output_format", &self.output_format, OUTPUT_GRAMMAR_PLACEHOLDER)?;

        let defined = category_names(&self.category_definitions);
        for name in &defined {
            match EntityLabel::parse_loose(name) {
                Some(label) if label.is_gold() && label.as_str() == name => {}
                _ => {
                    return Err(PromptError::Template(format!(
                        "category `{name}` is not a label the response parser accepts"
                    )))
                }
            }
        }
        for label in EntityLabel::GOLD {
            if !defined.iter().any(|d| d == label.as_str()) {
                return Err(PromptError::Template(format!("category `{label}` is not defined")));
            }
        }
        Ok(())
    }
}

/// Names introduced as `name: definition` lines in the category section.
pub(crate) fn category_names(section: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*([A-Za-z]+):[ \t]+\S").expect("category regex"));
    re.captures_iter(section).map(|c| c[1].to_string()).collect()
}
